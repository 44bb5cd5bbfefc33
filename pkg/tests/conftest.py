"""Shared helpers: finite-difference checking, tiny configs, an independent
netpbm reader used as the round-trip oracle."""

import numpy as np
import pytest

from madvit.config import TrainConfig
from madvit.tensor import Tensor, no_grad

FD_STEP = 1e-4
FD_TOLERANCE = 1e-3


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_difference(fn, tensors, n_coords=3, step=FD_STEP, seed=0):
    """Worst relative error between analytic grads and central differences.

    `fn` maps the tensors to a scalar Tensor. Call backward on fn's output
    before invoking this; each tensor's `.grad` is compared at `n_coords`
    randomly chosen coordinates.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        flat = t.data.reshape(-1)
        grad = t.grad.reshape(-1)
        for idx in rng.choice(flat.size, size=min(n_coords, flat.size), replace=False):
            saved = flat[idx]
            with no_grad():
                flat[idx] = saved + step
                up = fn().item()
                flat[idx] = saved - step
                down = fn().item()
            flat[idx] = saved
            worst = max(worst, rel_err((up - down) / (2 * step), grad[idx]))
    return worst


def read_p6(path):
    """Deliberately separate P6 parser (no shared code with the package)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    assert fields[0] == b"P6"
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pixels = np.frombuffer(blob, dtype=np.uint8, count=width * height * 3, offset=pos)
    return pixels.reshape(height, width, 3), maxval


@pytest.fixture
def tiny_config():
    """Smallest config that still exercises every architectural piece."""
    return TrainConfig(
        input_size=16, stage_channels=(4, 8), blocks_per_stage=1, stage=2,
        B=2, r=2, d=8, k=2, M=2, mlp_hidden=16, num_classes=3,
        train_per_class=4, test_per_class=2, batch_size=4, epochs=1,
        lr=0.01, lr_decay_epochs=(2,), seed=0,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
