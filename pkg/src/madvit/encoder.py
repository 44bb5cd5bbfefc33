"""Token projection and pre-norm transformer encoder with head dropping.

Features become tokens through a 1x1 projection, a row-major flatten, a
learned class token prepended at index 0, and learned position embeddings.
Each encoder block is pre-norm: x + MSA(LN(x)), then x + MLP(LN(x)) with a
GELU between the two linear layers. During training, with probability p2 per
sample, the output of one attention head (chosen uniformly) is zeroed before
the output projection; as with the branch maps, survivors are not rescaled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .regularizers import (Mode, decisions_to_keep_mask, draw_sample_decisions, drop_block,
                           dropout)
from .tensor import (Tensor, add, as_tensor, concat, conv2d, expand, gelu, layer_norm, matmul,
                     mul, parameter, reshape, select, softmax, transpose)

CLASS_TOKEN_INDEX = 0


@dataclass(frozen=True)
class ProjectionConfig:
    """Width and depth of the token pipeline.

    embed_dim is both the 1x1 projection width and the token dimension, so the
    flattened feature columns feed the encoder without a second linear map.
    """

    embed_dim: int = 128
    heads: int = 8
    blocks: int = 4
    mlp_hidden: int = 256
    num_classes: int = 7

    def __post_init__(self):
        if self.heads < 1 or self.blocks < 1:
            raise ConfigurationError(
                f"need at least one head and one block, got heads={self.heads}, blocks={self.blocks}")
        if self.embed_dim % self.heads != 0:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.num_classes < 2:
            raise ConfigurationError(f"need at least two classes, got {self.num_classes}")


@dataclass
class TokenSequence:
    """Encoder tokens; the class token always sits at index 0."""

    tokens: Tensor

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]


@dataclass
class ProjectionParams:
    conv: Tensor        # (1, 1, c, d)
    conv_bias: Tensor   # (d,)
    cls: Tensor         # (1, d)
    pos: Tensor         # (N, d) including the class position


@dataclass
class BlockParams:
    heads: int
    wq: Tensor
    wk: Tensor
    wv: Tensor
    proj: Tensor
    proj_bias: Tensor
    mlp1: Tensor
    mlp1_bias: Tensor
    mlp2: Tensor
    mlp2_bias: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


@dataclass
class HeadParams:
    weight: Tensor      # (d, num_classes)
    bias: Tensor        # (num_classes,)


def truncated_normal(rng, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with draws beyond two deviations resampled."""
    out = rng.normal(0.0, std, shape)
    while True:
        bad = np.abs(out) > 2.0 * std
        if not bad.any():
            return out
        out[bad] = rng.normal(0.0, std, int(bad.sum()))


def init_projection(channels: int, grid_tokens: int, config: ProjectionConfig, rng) -> ProjectionParams:
    d = config.embed_dim
    return ProjectionParams(
        conv=parameter(rng.normal(0.0, np.sqrt(2.0 / channels), (1, 1, channels, d))),
        conv_bias=parameter(np.zeros(d)),
        cls=parameter(truncated_normal(rng, (1, d))),
        pos=parameter(truncated_normal(rng, (grid_tokens + 1, d))),
    )


def init_block(config: ProjectionConfig, rng) -> BlockParams:
    d, hidden = config.embed_dim, config.mlp_hidden
    return BlockParams(
        heads=config.heads,
        wq=parameter(truncated_normal(rng, (d, d))),
        wk=parameter(truncated_normal(rng, (d, d))),
        wv=parameter(truncated_normal(rng, (d, d))),
        proj=parameter(truncated_normal(rng, (d, d))),
        proj_bias=parameter(np.zeros(d)),
        mlp1=parameter(truncated_normal(rng, (d, hidden))),
        mlp1_bias=parameter(np.zeros(hidden)),
        mlp2=parameter(truncated_normal(rng, (hidden, d))),
        mlp2_bias=parameter(np.zeros(d)),
        ln1_gain=parameter(np.ones(d)),
        ln1_bias=parameter(np.zeros(d)),
        ln2_gain=parameter(np.ones(d)),
        ln2_bias=parameter(np.zeros(d)),
    )


def init_head(config: ProjectionConfig, rng) -> HeadParams:
    return HeadParams(
        weight=parameter(truncated_normal(rng, (config.embed_dim, config.num_classes))),
        bias=parameter(np.zeros(config.num_classes)),
    )


def project_to_sequence(x: Tensor, params: ProjectionParams) -> TokenSequence:
    """1x1-project features, flatten row-major, prepend class token, add positions."""
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise DimensionError(f"expected (h, w, c) or (n, h, w, c) features, got {x.shape}")
    d = params.conv.shape[-1]
    h, w = x.shape[-3], x.shape[-2]
    if params.pos.shape != (h * w + 1, d):
        raise DimensionError(
            f"position table {params.pos.shape} does not cover a {h}x{w} grid plus class token")
    projected = add(conv2d(x, params.conv), params.conv_bias)
    if x.ndim == 4:
        n = x.shape[0]
        tokens = reshape(projected, (n, h * w, d))
        cls = expand(reshape(params.cls, (1, 1, d)), (n, 1, d))
    else:
        tokens = reshape(projected, (h * w, d))
        cls = params.cls
    seq = concat([cls, tokens], axis=-2)
    return TokenSequence(tokens=add(seq, params.pos))


def self_attention(x: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor,
                   return_attention: bool = False):
    """Single-head scaled dot-product attention over a token sequence.

    x: (N, d_in). A = softmax(q k^T / sqrt(d_k)) row-wise; output A v.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"self_attention expects (N, d) tokens, got {x.shape}")
    q = matmul(x, w_q)
    k = matmul(x, w_k)
    v = matmul(x, w_v)
    d_k = q.shape[-1]
    scores = mul(matmul(q, transpose(k)), 1.0 / np.sqrt(d_k))
    attn = softmax(scores, axis=-1)
    out = matmul(attn, v)
    return (out, attn) if return_attention else out


def _drop_head_outputs(heads_out: Tensor, p2: float, mode: Mode, rng,
                       kind: str, block_size: int):
    """Apply the configured regularizer to per-head outputs (n, k, N, d_k)."""
    n, k, length, d_k = heads_out.shape
    if kind == "mad":
        if mode is Mode.INFERENCE or p2 == 0.0:
            return heads_out, []
        decisions = draw_sample_decisions(n, k, p2, rng)
        keep = decisions_to_keep_mask(decisions, k)
        if keep.all():
            return heads_out, decisions
        return mul(heads_out, Tensor(keep[:, :, None, None])), decisions
    if kind == "dropout":
        return dropout(heads_out, p2, mode, rng), []
    if kind == "spatial":
        if mode is Mode.INFERENCE or p2 == 0.0:
            return heads_out, []
        keep = (rng.random((n, k)) >= p2) / (1.0 - p2)
        return mul(heads_out, Tensor(keep[:, :, None, None])), []
    if kind == "dropblock":
        flat = reshape(heads_out, (n * k, length, d_k, 1))
        flat = drop_block(flat, p2, block_size, mode, rng)
        return reshape(flat, (n, k, length, d_k)), []
    raise ConfigurationError(f"unknown regularizer kind {kind!r}")


def msa_with_msad(x: Tensor, block: BlockParams, p2: float, mode: Mode, rng,
                  kind: str = "mad", block_size: int = 3, collect=None):
    """Multi-head self-attention with per-sample head dropping.

    x: (N, d) or (n, N, d). Heads are computed packed: wq/wk/wv are (d, d)
    with head h owning columns [h*d_k, (h+1)*d_k). Per-head outputs are
    masked (the drop), concatenated, and passed through the output projection.
    `collect`, when given a list, receives each call's attention weights
    shaped (n, heads, N, N).
    """
    x = as_tensor(x)
    single = x.ndim == 2
    xt = reshape(x, (1,) + x.shape) if single else x
    if xt.ndim != 3:
        raise DimensionError(f"expected (N, d) or (n, N, d) tokens, got {x.shape}")
    n, length, d = xt.shape
    k = block.heads
    if d % k != 0:
        raise ConfigurationError(f"token dim {d} not divisible by {k} heads")
    d_k = d // k

    def split_heads(t):
        return transpose(reshape(t, (n, length, k, d_k)), (0, 2, 1, 3))

    q = split_heads(matmul(xt, block.wq))
    key = split_heads(matmul(xt, block.wk))
    v = split_heads(matmul(xt, block.wv))
    scores = mul(matmul(q, transpose(key, (0, 1, 3, 2))), 1.0 / np.sqrt(d_k))
    attn = softmax(scores, axis=-1)
    if collect is not None:
        collect.append(attn.data.copy())
    heads_out = matmul(attn, v)
    heads_out, decisions = _drop_head_outputs(heads_out, p2, mode, rng, kind, block_size)
    merged = reshape(transpose(heads_out, (0, 2, 1, 3)), (n, length, d))
    out = add(matmul(merged, block.proj), block.proj_bias)
    if single:
        out = reshape(out, (length, d))
        if kind == "mad" and decisions:
            return out, decisions[0]
        return out, None
    return out, decisions


def encoder_block(seq: TokenSequence, block: BlockParams, p2: float, mode: Mode, rng,
                  kind: str = "mad", block_size: int = 3, collect=None):
    """Pre-norm block: x + MSA(LN(x)), then x + MLP(LN(x))."""
    t = seq.tokens
    normed = layer_norm(t, block.ln1_gain, block.ln1_bias)
    attended, decisions = msa_with_msad(normed, block, p2, mode, rng,
                                        kind=kind, block_size=block_size, collect=collect)
    t = add(t, attended)
    normed = layer_norm(t, block.ln2_gain, block.ln2_bias)
    hidden = gelu(add(matmul(normed, block.mlp1), block.mlp1_bias))
    t = add(t, add(matmul(hidden, block.mlp2), block.mlp2_bias))
    return TokenSequence(tokens=t), decisions


def classify_head(seq: TokenSequence, head: HeadParams) -> Tensor:
    """Logits from the class token alone; other tokens never reach the head."""
    tokens = seq.tokens
    cls = select(tokens, axis=tokens.ndim - 2, index=CLASS_TOKEN_INDEX)
    if cls.ndim == 1:
        return reshape(add(matmul(reshape(cls, (1, -1)), head.weight), head.bias),
                       (head.weight.shape[-1],))
    return add(matmul(cls, head.weight), head.bias)
