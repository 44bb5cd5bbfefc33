"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A Tensor wraps a numpy float64 array. Forward operations record their input
tensors and a backward closure on the output; `backward` builds the ordered
record of executed operations reachable from a scalar loss and replays it in
reverse, accumulating gradients with `+=` so tensors used several times
collect contributions from every use.

Convolutions support the kernel sizes and strides the model actually needs
(1x1 and 3x3, stride 1 or 2) and are lowered to a single matrix product per
call. All ops accept an optional leading batch axis so a whole mini-batch is
one recorded graph.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, UsageError

_GRAD_ENABLED = True

_SUPPORTED_KERNELS = (1, 3)
_SUPPORTED_STRIDES = (1, 2)
_SUPPORTED_PADDINGS = (0, 1)

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)
_GELU_CUBIC = 0.044715


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / plain numerics)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """A float64 array plus the bookkeeping needed to differentiate through it.

    Leaf tensors built with requires_grad=True preallocate `grad` as zeros, so
    an untouched parameter reads as zero gradient rather than None. Operation
    outputs allocate theirs on the first backward contribution instead; a
    mini-batch graph makes thousands of them and most receive exactly one.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._op: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("tensor/tensor division is not a recorded op; divide by a scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data) -> Tensor:
    """A leaf tensor that collects gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
        out._op = op
    return out


def _sum_to_shape(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Undo numpy broadcasting: reduce grad back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accumulate(parent: Tensor, grad: np.ndarray) -> None:
    if not parent.requires_grad:
        return
    reduced = _sum_to_shape(grad, parent.data.shape)
    if parent.grad is None:
        # Copy: `reduced` may alias a buffer the caller hands to other parents.
        parent.grad = np.array(reduced)
    else:
        parent.grad += reduced


# -- computation record ---------------------------------------------------


@dataclass
class ComputationRecord:
    """Operations reachable from one output, in the order they can replay.

    `ops` is topologically sorted: every operation's inputs appear earlier
    (or are leaves). Reverse iteration therefore visits each op exactly once
    with its output gradient already complete.
    """

    ops: list

    @classmethod
    def trace(cls, output: Tensor) -> "ComputationRecord":
        ordered: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                ordered.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(ops=[t for t in ordered if t._backward_fn is not None])


def backward(loss: Tensor) -> None:
    """Populate `grad` for every tensor the scalar loss depends on."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("backward called on a tensor with no recorded operations")
    record = ComputationRecord.trace(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(record.ops):
        if node.grad is not None:
            node._backward_fn(node.grad)


# -- elementwise and structural ops ---------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    data = a.data + b.data

    def backward_fn(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(data, (a, b), backward_fn, "add")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    data = a.data * b.data

    def backward_fn(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(data, (a, b), backward_fn, "mul")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    data = x.data.reshape(shape)

    def backward_fn(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _make(data, (x,), backward_fn, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(int(a) for a in axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    data = x.data.transpose(axes)

    def backward_fn(g):
        _accumulate(x, g.transpose(inverse))

    return _make(data, (x,), backward_fn, "transpose")


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise UsageError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _accumulate(t, piece)

    return _make(data, tuple(tensors), backward_fn, "concat")


def select(x: Tensor, axis: int, index: int) -> Tensor:
    """Take one slice along an axis (removing that axis)."""
    data = np.take(x.data, index, axis=axis)

    def backward_fn(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.moveaxis(x.grad, axis, 0)[index] += g

    return _make(data, (x,), backward_fn, "select")


def expand(x: Tensor, shape) -> Tensor:
    """Broadcast to a larger shape; gradient sums over the broadcast axes."""
    shape = tuple(int(s) for s in shape)
    data = np.broadcast_to(x.data, shape)

    def backward_fn(g):
        _accumulate(x, g)

    return _make(np.ascontiguousarray(data), (x,), backward_fn, "expand")


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if x.requires_grad:
            if axis is not None and not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                g = np.expand_dims(g, axes)
            spread = np.broadcast_to(g, x.data.shape)
            if x.grad is None:
                x.grad = np.array(spread)
            else:
                x.grad += spread

    return _make(data, (x,), backward_fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        return tensor_sum(x) * (1.0 / x.size)
    axes = axis if isinstance(axis, tuple) else (axis,)
    count = 1
    for a in axes:
        count *= x.shape[a]
    return tensor_sum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def elementwise_max(tensors) -> Tensor:
    """Pointwise maximum over same-shaped tensors.

    The gradient routes to the first operand attaining the maximum at each
    position (the usual subgradient choice; ties are measure-zero for the
    continuous inputs this sees).
    """
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise UsageError("elementwise_max needs at least one tensor")
    shape = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != shape:
            raise DimensionError(f"elementwise_max shapes differ: {shape} vs {t.data.shape}")
    stacked = np.stack([t.data for t in tensors], axis=0)
    winner = stacked.argmax(axis=0)
    data = np.take_along_axis(stacked, winner[None], axis=0)[0]

    def backward_fn(g):
        for i, t in enumerate(tensors):
            _accumulate(t, g * (winner == i))

    return _make(data, tuple(tensors), backward_fn, "elementwise_max")


# -- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; either operand may carry leading batch axes."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs 2d+ operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, np.matmul(g, b.data.swapaxes(-1, -2)))
        if b.requires_grad:
            _accumulate(b, np.matmul(a.data.swapaxes(-1, -2), g))

    return _make(data, (a, b), backward_fn, "matmul")


# -- convolution -----------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2d convolution over channel-last images.

    x: (h, w, c_in) or (n, h, w, c_in); kernel: (k, k, c_in, c_out).
    Lowered to one matrix product via an im2col gather, which keeps the whole
    batch in a single BLAS call.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise DimensionError(f"kernel must be (k, k, c_in, c_out), got {kernel.shape}")
    k = kernel.shape[0]
    if k not in _SUPPORTED_KERNELS:
        raise ConfigurationError(f"kernel size {k} unsupported (supported: {_SUPPORTED_KERNELS})")
    if stride not in _SUPPORTED_STRIDES:
        raise ConfigurationError(f"stride {stride} unsupported (supported: {_SUPPORTED_STRIDES})")
    if padding not in _SUPPORTED_PADDINGS:
        raise ConfigurationError(f"padding {padding} unsupported (supported: {_SUPPORTED_PADDINGS})")

    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be (h, w, c) or (n, h, w, c), got {x.shape}")
    xd = x.data if batched else x.data[None]
    n, h, w, c_in = xd.shape
    if c_in != kernel.shape[2]:
        raise DimensionError(f"input channels {c_in} do not match kernel {kernel.shape}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise DimensionError(f"input {h}x{w} smaller than kernel {k} at padding {padding}")

    if padding:
        xd = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    out_h = conv_output_size(h, k, stride, padding)
    out_w = conv_output_size(w, k, stride, padding)

    windows = sliding_window_view(xd, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    # windows: (n, out_h, out_w, c_in, k, k) -> columns ordered (k, k, c_in)
    cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3))
    cols = cols.reshape(n * out_h * out_w, k * k * c_in)
    kmat = kernel.data.reshape(k * k * c_in, -1)
    out = (cols @ kmat).reshape(n, out_h, out_w, kernel.shape[3])
    padded_shape = xd.shape

    def backward_fn(g):
        gmat = g.reshape(n * out_h * out_w, -1) if batched else g.reshape(out_h * out_w, -1)
        if kernel.requires_grad:
            _accumulate(kernel, (cols.T @ gmat).reshape(kernel.data.shape))
        if x.requires_grad:
            gcols = (gmat @ kmat.T).reshape(n, out_h, out_w, k, k, c_in)
            gx = np.zeros(padded_shape)
            for di in range(k):
                for dj in range(k):
                    gx[:, di:di + stride * out_h:stride, dj:dj + stride * out_w:stride, :] += gcols[:, :, :, di, dj, :]
            if padding:
                gx = np.ascontiguousarray(gx[:, padding:-padding, padding:-padding, :])
            gx = gx if batched else gx[0]
            if x.grad is None:
                x.grad = gx
            else:
                x.grad += gx

    return _make(out if batched else out[0], (x, kernel), backward_fn, "conv2d")


# -- activations -----------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = np.maximum(x.data, 0.0)

    def backward_fn(g):
        _accumulate(x, g * (x.data > 0.0))

    return _make(data, (x,), backward_fn, "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # Split by sign to avoid overflow in exp for large |x|.
    data = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                    np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def backward_fn(g):
        _accumulate(x, g * data * (1.0 - data))

    return _make(data, (x,), backward_fn, "sigmoid")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = as_tensor(x)
    inner = _SQRT_2_OVER_PI * (x.data + _GELU_CUBIC * x.data ** 3)
    t = np.tanh(inner)
    data = 0.5 * x.data * (1.0 + t)

    def backward_fn(g):
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * x.data ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * d_inner
        _accumulate(x, g * local)

    return _make(data, (x,), backward_fn, "gelu")


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "gelu": gelu}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown activation {kind!r} (known: {sorted(_ACTIVATIONS)})") from None
    return fn(x)


# -- normalization and loss --------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row-stochastic softmax, stabilized by max subtraction before exp."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        if x.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            gx = data * (g - dot)
            if x.grad is None:
                x.grad = gx
            else:
                x.grad += gx

    return _make(data, (x,), backward_fn, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Normalize along one axis to zero mean / unit variance, then scale-shift."""
    x = as_tensor(x)
    gain = as_tensor(gain)
    bias = as_tensor(bias)
    dim = x.shape[axis]
    if gain.shape != (dim,) or bias.shape != (dim,):
        raise DimensionError(f"layer_norm gain/bias must be ({dim},), got {gain.shape} and {bias.shape}")
    if axis != -1 and axis != x.ndim - 1:
        raise ConfigurationError("layer_norm normalizes the last axis")

    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain.data + bias.data

    def backward_fn(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, dim).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, dim).sum(axis=0))
        if x.requires_grad:
            gx_hat = g * gain.data
            term = gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
            gx = term * inv
            if x.grad is None:
                x.grad = gx
            else:
                x.grad += gx

    return _make(data, (x, gain, bias), backward_fn, "layer_norm")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits).

    logits: (n, num_classes). Computed through log-sum-exp so large logits
    do not overflow.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (n, classes) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, num_classes = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise IndexError(f"labels must lie in [0, {num_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.data.max(axis=1)
    picked = logits.data[np.arange(n), labels]
    data = np.array((lse - picked).mean())

    def backward_fn(g):
        if logits.requires_grad:
            p = np.exp(shifted)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n), labels] -= 1.0
            gx = (float(g) / n) * p
            if logits.grad is None:
                logits.grad = gx
            else:
                logits.grad += gx

    return _make(data, (logits,), backward_fn, "cross_entropy")


# -- optimizer ---------------------------------------------------------------


def sgd_momentum_step(params, velocities, lr: float, momentum: float) -> None:
    """One SGD step: v <- momentum*v + grad; p <- p - lr*v; grads cleared."""
    params = list(params)
    velocities = list(velocities)
    if len(params) != len(velocities):
        raise UsageError(f"{len(params)} params but {len(velocities)} velocity slots")
    for p, v in zip(params, velocities):
        if p.grad is None:
            raise UsageError("parameter has no gradient buffer; was it created with requires_grad?")
        if v.shape != p.shape:
            raise DimensionError(f"velocity shape {v.shape} does not match parameter {p.shape}")
        v.data *= momentum
        v.data += p.grad
        p.data -= lr * v.data
        p.grad[...] = 0.0


def make_velocities(params) -> list[Tensor]:
    return [Tensor(np.zeros_like(p.data)) for p in params]


# -- serialization -----------------------------------------------------------

TENSOR_MAGIC = b"TFT1"


def write_tensor_bytes(array: np.ndarray) -> bytes:
    """Serialize one array: magic, u32 rank, u32 dims, little-endian f64 data."""
    array = np.asarray(array, dtype=np.float64)
    header = TENSOR_MAGIC + struct.pack("<I", array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + array.astype("<f8").tobytes()


def read_tensor_bytes(buffer: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one serialized tensor; returns (array, next offset)."""
    if buffer[offset:offset + 4] != TENSOR_MAGIC:
        raise UsageError(f"bad tensor magic at offset {offset}")
    offset += 4
    (rank,) = struct.unpack_from("<I", buffer, offset)
    offset += 4
    shape = struct.unpack_from(f"<{rank}I", buffer, offset)
    offset += 4 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    data = np.frombuffer(buffer, dtype="<f8", count=count, offset=offset)
    offset += 8 * count
    return data.reshape(shape).astype(np.float64), offset


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(write_tensor_bytes(array))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        array, _ = read_tensor_bytes(f.read())
    return array
