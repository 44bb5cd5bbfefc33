"""Checkpoint container: a text index followed by raw tensor records.

Layout::

    TFCK1\n
    <count>\n
    <name> <payload-offset> <dim0> <dim1> ...\n   (count lines)
    END\n
    <tensor records back to back>

Offsets are relative to the first byte after the END line. Each record is
the standalone tensor format, so one entry can also be read on its own.
The training configuration travels in a config.txt sidecar next to the
checkpoint, written by the callers that need it.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .errors import DataError
from .model import MadVit
from .tensor import read_tensor_bytes, write_tensor_bytes

CHECKPOINT_MAGIC = b"TFCK1"


def save_checkpoint(path, named_arrays: list[tuple[str, np.ndarray]]) -> None:
    payload = io.BytesIO()
    lines = []
    for name, array in named_arrays:
        if " " in name or "\n" in name:
            raise DataError(f"tensor name {name!r} must not contain whitespace")
        offset = payload.tell()
        payload.write(write_tensor_bytes(np.asarray(array, dtype=np.float64)))
        dims = " ".join(str(d) for d in np.asarray(array).shape)
        lines.append(f"{name} {offset} {dims}".rstrip())
    header = CHECKPOINT_MAGIC.decode("ascii") + "\n" + str(len(named_arrays)) + "\n"
    header += "".join(line + "\n" for line in lines) + "END\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload.getvalue())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    end_mark = b"\nEND\n"
    split = raw.find(end_mark)
    if not raw.startswith(CHECKPOINT_MAGIC + b"\n") or split < 0:
        raise DataError(f"{path}: not a checkpoint file")
    header_lines = raw[:split].decode("ascii").splitlines()
    payload = raw[split + len(end_mark):]
    count = int(header_lines[1])
    entries = header_lines[2:]
    if len(entries) != count:
        raise DataError(f"{path}: header promises {count} tensors, lists {len(entries)}")
    state: dict[str, np.ndarray] = {}
    for line in entries:
        fields = line.split(" ")
        name, offset = fields[0], int(fields[1])
        dims = tuple(int(d) for d in fields[2:])
        array, _ = read_tensor_bytes(payload, offset)
        if array.shape != dims:
            raise DataError(f"{path}: {name} index says {dims}, record says {array.shape}")
        if name in state:
            raise DataError(f"{path}: duplicate tensor name {name!r}")
        state[name] = array
    return state


def save_model(path, model: MadVit) -> None:
    save_checkpoint(path, [(name, t.data) for name, t in model.parameters()])


def model_from_checkpoint(path, config: TrainConfig, rng=None) -> MadVit:
    """Rebuild a model from its checkpoint; shapes must match the config."""
    if rng is None:
        rng = np.random.default_rng(0)
    model = MadVit(config, rng)
    model.load_state(load_checkpoint(path))
    return model
