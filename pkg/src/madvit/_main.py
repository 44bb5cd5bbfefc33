"""Console entry point.

TRANSFER_THREADS must take effect before numpy loads its BLAS, so this module
touches only os/sys until the environment is pinned.
"""

import os
import sys


def _cap_threads() -> None:
    budget = os.environ.get("TRANSFER_THREADS")
    if not budget:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, budget)


def main() -> None:
    _cap_threads()
    from .cli import run

    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
