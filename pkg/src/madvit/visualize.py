"""Attention rollout and heatmap rendering.

Rollout chains the per-block attention matrices (plus the identity for the
residual path) into a single class-token-to-patch relevance vector. Maps are
rendered as jet-colormapped overlays on the grayscale input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, UsageError
from .imageio import write_ppm

HEAD_AGGREGATES = ("mean", "max", "min")
_ROW_SUM_TOLERANCE = 1e-6
_MASS_FLOOR = 1e-12


@dataclass
class Heatmap:
    """A per-patch relevance vector plus its spatial arrangement."""

    scores: np.ndarray          # (tokens,) nonnegative, sums to 1
    grid: tuple[int, int]       # (rows, cols), rows * cols == tokens

    def as_grid(self) -> np.ndarray:
        return self.scores.reshape(self.grid)


def aggregate_heads(attention: np.ndarray, how: str = "mean") -> np.ndarray:
    """Collapse (k, N, N) head attention to a single (N, N) matrix."""
    if how not in HEAD_AGGREGATES:
        raise UsageError(f"head aggregate must be one of {HEAD_AGGREGATES}, got {how!r}")
    if attention.ndim != 3:
        raise UsageError(f"expected (heads, N, N) attention, got shape {attention.shape}")
    if how == "mean":
        return attention.mean(axis=0)
    if how == "max":
        return attention.max(axis=0)
    return attention.min(axis=0)


def attention_rollout(per_block: list[np.ndarray], head_aggregate: str = "mean") -> Heatmap:
    """Chain attention through the blocks and read off the class-token row.

    Input: one array per block, first block first, either (k, N, N) raw head
    stacks or (N, N) matrices aggregated beforehand. Every row must already
    sum to one; a violation means the caller handed in something that is not
    attention, and is rejected outright.
    """
    if not per_block:
        raise UsageError("rollout needs at least one attention matrix")
    n_tokens = per_block[0].shape[-1]
    rolled = np.eye(n_tokens)
    for i, block_attn in enumerate(per_block, start=1):
        if block_attn.ndim not in (2, 3) or block_attn.shape[-2:] != (n_tokens, n_tokens):
            raise UsageError(
                f"block {i} attention is {block_attn.shape}, expected trailing "
                f"({n_tokens}, {n_tokens})")
        row_sums = block_attn.sum(axis=-1)
        if np.max(np.abs(row_sums - 1.0)) > _ROW_SUM_TOLERANCE:
            raise ContractError(
                f"block {i} attention rows are not normalized "
                f"(worst deviation {np.max(np.abs(row_sums - 1.0)):.3e})")
        merged = block_attn if block_attn.ndim == 2 else aggregate_heads(block_attn, head_aggregate)
        with_residual = merged + np.eye(n_tokens)
        with_residual /= with_residual.sum(axis=-1, keepdims=True)
        rolled = with_residual @ rolled
    class_row = rolled[0, 1:]
    mass = class_row.sum()
    if mass < _MASS_FLOOR:
        scores = np.full(n_tokens - 1, 1.0 / (n_tokens - 1))
    else:
        scores = class_row / mass
    side = int(round((n_tokens - 1) ** 0.5))
    if side * side == n_tokens - 1:
        grid = (side, side)
    else:
        grid = (1, n_tokens - 1)
    return Heatmap(scores, grid)


def upsample_bilinear(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a 2D map with bilinear interpolation, pixel-center aligned."""
    h, w = grid.shape
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - fx) + grid[np.ix_(y0, x1)] * fx
    bottom = grid[np.ix_(y1, x0)] * (1 - fx) + grid[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bottom * fy


def jet_colormap(values: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to RGB via the classic jet ramp."""
    v = np.clip(values, 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4.0 * v - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * v - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * v - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def normalize_scores(values: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant map collapses to flat 0.5."""
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < 1e-30:
        return np.full_like(values, 0.5)
    return (values - lo) / (hi - lo)


def render_heatmap(heatmap: Heatmap, image: np.ndarray, path=None,
                   alpha: float = 0.5) -> np.ndarray:
    """Overlay an upsampled relevance map on the grayscale image.

    Returns the blended (h, w, 3) array; writes it as a P6 file when a path
    is given.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise UsageError(f"expected an (h, w, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    upsampled = upsample_bilinear(heatmap.as_grid(), h, w)
    colored = jet_colormap(normalize_scores(upsampled))
    gray = image.mean(axis=2, keepdims=True)
    blended = (1.0 - alpha) * np.broadcast_to(gray, image.shape) + alpha * colored
    blended = np.clip(blended, 0.0, 1.0)
    if path is not None:
        write_ppm(path, blended)
    return blended


def composite_with_local_map(heatmap: Heatmap, local_map: np.ndarray,
                             image: np.ndarray, path=None,
                             alpha: float = 0.5) -> np.ndarray:
    """Blend rollout relevance with a fused local attention map, then render.

    `local_map` is the (h', w', 1) sigmoid map from the local branches; it is
    upsampled to the rollout grid and multiplied in before normalization.
    """
    rollout_grid = heatmap.as_grid()
    local_grid = upsample_bilinear(local_map[..., 0], *rollout_grid.shape)
    combined = rollout_grid * local_grid
    total = combined.sum()
    if total < _MASS_FLOOR:
        combined = np.full_like(combined, 1.0 / combined.size)
    else:
        combined = combined / total
    merged = Heatmap(combined.ravel(), heatmap.grid)
    return render_heatmap(merged, image, path, alpha)
