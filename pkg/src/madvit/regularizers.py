"""Stochastic drop regularizers and their shared decision record.

The central primitive is group dropping (`mad_drop`): with probability p an
entire member of a group of same-shaped tensors is replaced by zeros, the
member chosen uniformly. Survivors are NOT rescaled, the drop happens only in
training mode, and the zeroing is recorded as a multiply-by-zero so no
gradient reaches the dropped member.

Classical baselines (elementwise dropout, contiguous-block dropout, whole-
channel dropout) live here too so training can swap the drop mechanism while
everything else stays fixed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from .errors import ConfigurationError, UsageError
from .tensor import Tensor, as_tensor, mul

REGULARIZER_KINDS = ("mad", "dropout", "dropblock", "spatial")


class Mode(Enum):
    TRAINING = "training"
    INFERENCE = "inference"


@dataclass(frozen=True)
class DropDecision:
    """One drop event: which member (if any) was zeroed, and from what state.

    dropped_index is None when nothing fired this call (or in inference).
    rng_state is an opaque token identifying the generator state that produced
    the decision; it exists so logged sequences can be compared across runs.
    """

    dropped_index: int | None
    group_size: int
    probability: float
    rng_state: int


def _rng_token(rng) -> int:
    try:
        return int(rng.bit_generator.state["state"]["state"]) & 0xFFFFFFFFFFFFFFFF
    except (AttributeError, KeyError, TypeError):
        return 0


def _check_probability(p: float) -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"drop probability must lie in [0, 1], got {p}")
    return p


def draw_decision(p: float, group_size: int, rng) -> DropDecision:
    """Sample one drop decision: fire with probability p, index uniform."""
    token = _rng_token(rng)
    index = None
    if p > 0.0 and rng.random() < p:
        index = int(rng.integers(group_size))
    return DropDecision(dropped_index=index, group_size=group_size, probability=p, rng_state=token)


def draw_sample_decisions(n: int, group_size: int, p: float, rng) -> list[DropDecision]:
    """Independent decisions for each of n samples, in sample order."""
    token = _rng_token(rng)
    out = []
    for _ in range(n):
        index = None
        if p > 0.0 and rng.random() < p:
            index = int(rng.integers(group_size))
        out.append(DropDecision(dropped_index=index, group_size=group_size,
                                probability=p, rng_state=token))
    return out


def decisions_to_keep_mask(decisions: list[DropDecision], group_size: int) -> np.ndarray:
    """(n, group_size) float mask: 0 where a member was dropped, else 1."""
    mask = np.ones((len(decisions), group_size))
    for i, d in enumerate(decisions):
        if d.dropped_index is not None:
            mask[i, d.dropped_index] = 0.0
    return mask


def mad_drop(group, p: float, mode: Mode, rng) -> tuple[list[Tensor], DropDecision]:
    """Zero at most one member of the group, chosen uniformly, w.p. p.

    Non-dropped members are returned as the same objects (bitwise unchanged;
    there is no survivor rescaling). The dropped member is multiplied by zero
    inside the recorded graph, so its upstream gradient is exactly zero.
    Inference mode is the identity.
    """
    group = [as_tensor(t) for t in group]
    if not group:
        raise UsageError("mad_drop needs a non-empty group")
    p = _check_probability(p)
    if mode is Mode.INFERENCE or p == 0.0:
        return list(group), DropDecision(None, len(group), p, _rng_token(rng) if p else 0)
    decision = draw_decision(p, len(group), rng)
    if decision.dropped_index is None:
        return list(group), decision
    out = [mul(t, 0.0) if i == decision.dropped_index else t for i, t in enumerate(group)]
    return out, decision


def mad_drop_samples(group, p: float, mode: Mode, rng) -> tuple[list[Tensor], list[DropDecision]]:
    """Per-sample group dropping for batched members shaped (n, ...).

    Each sample along the leading axis draws its own decision, so within one
    mini-batch different samples may lose different members.
    """
    group = [as_tensor(t) for t in group]
    if not group:
        raise UsageError("mad_drop_samples needs a non-empty group")
    p = _check_probability(p)
    n = group[0].shape[0]
    if mode is Mode.INFERENCE or p == 0.0:
        return list(group), []
    decisions = draw_sample_decisions(n, len(group), p, rng)
    keep = decisions_to_keep_mask(decisions, len(group))
    out = []
    for b, member in enumerate(group):
        if keep[:, b].all():
            out.append(member)
            continue
        mask = keep[:, b].reshape((n,) + (1,) * (member.ndim - 1))
        out.append(mul(member, Tensor(mask)))
    return out, decisions


def dropout(x: Tensor, p: float, mode: Mode, rng) -> Tensor:
    """Elementwise dropout; survivors are scaled by 1/(1-p)."""
    x = as_tensor(x)
    p = float(p)
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must lie in [0, 1), got {p}")
    if mode is Mode.INFERENCE or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(mask))


@lru_cache(maxsize=256)
def _block_seed_rate(h: int, w: int, block_size: int, p: float) -> float:
    """Per-position seed rate whose exact expected dropped fraction equals p.

    A block seeded at corner (r, s) covers [r, r+bs) x [s, s+bs); a pixel
    survives iff none of the valid corners covering it fires. The first-order
    rate p*h*w / (bs^2 * (h-bs+1) * (w-bs+1)) undershoots once blocks overlap,
    so we solve the exact coverage expectation by bisection instead.
    """
    bs = block_size
    rows = np.array([min(i, h - bs) - max(0, i - bs + 1) + 1 for i in range(h)], dtype=np.float64)
    cols = np.array([min(j, w - bs) - max(0, j - bs + 1) + 1 for j in range(w)], dtype=np.float64)
    coverage = np.outer(rows, cols)

    def dropped_fraction(gamma: float) -> float:
        return 1.0 - float(((1.0 - gamma) ** coverage).mean())

    lo, hi = 0.0, 1.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if dropped_fraction(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def drop_block(x: Tensor, p: float, block_size: int, mode: Mode, rng) -> Tensor:
    """Drop contiguous block_size x block_size spatial regions per channel.

    x: (h, w, c) or (n, h, w, c). Blocks are seeded independently per sample
    and channel; survivors are rescaled by count_total / count_kept so the
    expected activation magnitude is preserved.
    """
    x = as_tensor(x)
    p = _check_probability(p)
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise ConfigurationError(f"drop_block input must be (h, w, c) or (n, h, w, c), got {x.shape}")
    h, w, c = x.shape[-3:]
    if block_size % 2 == 0 or not 1 <= block_size <= min(h, w):
        raise ConfigurationError(f"block_size {block_size} invalid for a {h}x{w} map; it must be odd")
    if mode is Mode.INFERENCE or p == 0.0:
        return x

    n = x.shape[0] if batched else 1
    gamma = _block_seed_rate(h, w, block_size, p)
    hv, wv = h - block_size + 1, w - block_size + 1
    seeds = rng.random((n, hv, wv, c)) < gamma
    dropped = np.zeros((n, h, w, c), dtype=bool)
    for di in range(block_size):
        for dj in range(block_size):
            dropped[:, di:di + hv, dj:dj + wv, :] |= seeds
    keep = (~dropped).astype(np.float64)
    kept = keep.sum()
    scale = keep.size / kept if kept > 0 else 0.0
    mask = keep * scale
    if not batched:
        mask = mask[0]
    return mul(x, Tensor(mask))


def spatial_dropout(x: Tensor, p: float, mode: Mode, rng) -> Tensor:
    """Drop whole channels (last axis) w.p. p; survivors scaled by 1/(1-p).

    For batched input (n, h, w, c) each sample draws its own channel mask.
    """
    x = as_tensor(x)
    p = float(p)
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"spatial dropout probability must lie in [0, 1), got {p}")
    if x.ndim not in (3, 4):
        raise ConfigurationError(f"spatial_dropout input must be (h, w, c) or (n, h, w, c), got {x.shape}")
    if mode is Mode.INFERENCE or p == 0.0:
        return x
    c = x.shape[-1]
    if x.ndim == 4:
        keep = (rng.random((x.shape[0], c)) >= p) / (1.0 - p)
        mask = keep[:, None, None, :]
    else:
        keep = (rng.random(c) >= p) / (1.0 - p)
        mask = keep[None, None, :]
    return mul(x, Tensor(mask))


def group_regularizer(kind: str, group, p: float, mode: Mode, rng,
                      block_size: int = 3) -> tuple[list[Tensor], list[DropDecision]]:
    """Apply the configured drop mechanism to a group of same-shaped tensors.

    "mad" zeroes at most one member per sample; the baselines treat members
    independently ("spatial" treats each member as one channel, i.e. drops
    whole members with rescaling). Only "mad" yields drop decisions.
    """
    group = [as_tensor(t) for t in group]
    if kind == "mad":
        if group and group[0].ndim == 4:
            return mad_drop_samples(group, p, mode, rng)
        out, decision = mad_drop(group, p, mode, rng)
        return out, [decision]
    if kind == "dropout":
        return [dropout(m, p, mode, rng) for m in group], []
    if kind == "dropblock":
        return [drop_block(m, p, block_size, mode, rng) for m in group], []
    if kind == "spatial":
        p = float(p)
        if not 0.0 <= p < 1.0:
            raise ConfigurationError(f"spatial drop probability must lie in [0, 1), got {p}")
        if mode is Mode.INFERENCE or p == 0.0:
            return list(group), []
        batched = group[0].ndim == 4
        n = group[0].shape[0] if batched else 1
        keep = (rng.random((n, len(group))) >= p) / (1.0 - p)
        out = []
        for b, member in enumerate(group):
            if batched:
                mask = keep[:, b].reshape((n,) + (1,) * (member.ndim - 1))
            else:
                mask = keep[0, b]
            out.append(mul(member, Tensor(mask)))
        return out, []
    raise ConfigurationError(f"unknown regularizer kind {kind!r} (known: {REGULARIZER_KINDS})")


def warn_if_group_emptied(decisions, group_size: int) -> None:
    """A drop that removes the only member zeroes the whole aggregate."""
    if group_size != 1:
        return
    ds = decisions if isinstance(decisions, list) else [decisions]
    if any(d.dropped_index is not None for d in ds):
        warnings.warn("dropping the only member zeroes the aggregated map", RuntimeWarning,
                      stacklevel=3)
