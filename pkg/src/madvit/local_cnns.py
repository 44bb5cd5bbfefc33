"""Parallel local attention branches over stem features.

Each branch squeezes the feature channels through a 1x1 bottleneck (width
c/r, ReLU) and expands to a single-channel sigmoid map, scoring how much each
spatial position should count. During training the group-drop regularizer may
zero one whole branch map per sample, the surviving maps are fused by a
pointwise maximum, and the fused map reweights the features elementwise.
Dropping pushes the branches away from all scoring the same region.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, UsageError
from .regularizers import Mode, group_regularizer, warn_if_group_emptied
from .tensor import Tensor, add, as_tensor, conv2d, elementwise_max, mul, parameter, relu, sigmoid


@dataclass
class LANetBranch:
    """1x1 conv (c -> c/r) + ReLU, then 1x1 conv (c/r -> 1) + sigmoid."""

    conv1: Tensor
    conv1_bias: Tensor
    conv2: Tensor
    conv2_bias: Tensor
    reduction: int


def make_branches(channels: int, reduction: int, count: int, rng) -> list[LANetBranch]:
    if count < 0:
        raise ConfigurationError(f"branch count must be >= 0, got {count}")
    if channels % reduction != 0:
        raise ConfigurationError(
            f"channels {channels} not divisible by reduction {reduction}")
    hidden = channels // reduction
    branches = []
    for _ in range(count):
        branches.append(LANetBranch(
            conv1=parameter(rng.normal(0.0, np.sqrt(2.0 / channels), (1, 1, channels, hidden))),
            conv1_bias=parameter(np.zeros(hidden)),
            conv2=parameter(rng.normal(0.0, np.sqrt(2.0 / hidden), (1, 1, hidden, 1))),
            conv2_bias=parameter(np.zeros(1)),
            reduction=reduction,
        ))
    return branches


def lanet_forward(x: Tensor, branch: LANetBranch) -> Tensor:
    """Score map over spatial positions, shaped like x with one channel."""
    x = as_tensor(x)
    h = relu(add(conv2d(x, branch.conv1), branch.conv1_bias))
    return sigmoid(add(conv2d(h, branch.conv2), branch.conv2_bias))


def aggregate_max(maps) -> Tensor:
    """Fuse maps by pointwise maximum: M_out(x, y) = max_i M_i(x, y)."""
    return elementwise_max(maps)


def local_cnns_forward(x: Tensor, branches, p1: float, mode: Mode, rng,
                       kind: str = "mad", block_size: int = 3, collect=None):
    """Reweight features by the fused branch maps.

    Returns (features * fused_map, decisions). For a single (h, w, c) input
    with the group-drop regularizer, decisions is the one DropDecision drawn;
    batched input yields one decision per sample. `collect`, when given a
    list, receives each branch's pre-drop map as a plain array.
    """
    x = as_tensor(x)
    if not branches:
        raise UsageError("local_cnns_forward needs at least one branch")
    maps = [lanet_forward(x, branch) for branch in branches]
    if collect is not None:
        collect.extend(m.data.copy() for m in maps)
    dropped, decisions = group_regularizer(kind, maps, p1, mode, rng, block_size=block_size)
    if kind == "mad":
        warn_if_group_emptied(decisions, len(branches))
    fused = aggregate_max(dropped)
    out = mul(x, fused)
    if x.ndim == 3 and kind == "mad":
        return out, decisions[0]
    return out, decisions


def export_attention_maps(maps, directory, prefix: str = "map") -> list[str]:
    """Dump branch maps as 8-bit PGM files; returns the written paths.

    Accepts (h, w, 1) maps or batched (n, h, w, 1) maps, tensors or arrays.
    """
    from pathlib import Path

    from .imageio import write_pgm

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for b, m in enumerate(maps, start=1):
        arr = m.data if isinstance(m, Tensor) else np.asarray(m)
        batch = arr[None] if arr.ndim == 3 else arr
        for s, plane in enumerate(batch):
            path = directory / f"{prefix}{b}_{s:03d}.pgm"
            write_pgm(path, plane[:, :, 0])
            paths.append(str(path))
    return paths
