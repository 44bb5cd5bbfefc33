"""Autodiff core: forward oracles, per-op gradient checks, serialization."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from conftest import FD_TOLERANCE, finite_difference, rel_err
from madvit.errors import ConfigurationError, DimensionError, UsageError
from madvit.tensor import (Tensor, activation, add, as_tensor, backward, concat, conv2d,
                           conv_output_size, cross_entropy, elementwise_max, expand, gelu,
                           layer_norm, load_tensor, make_velocities, matmul, mean, mul, no_grad,
                           parameter, read_tensor_bytes, relu, reshape, save_tensor, select,
                           sgd_momentum_step, sigmoid, softmax, tensor_sum, transpose,
                           write_tensor_bytes)


# -- forward value oracles ---------------------------------------------------


def test_matmul_identity():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(3, 3))
    out = matmul(Tensor(np.eye(3)), Tensor(m))
    npt.assert_array_equal(out.data, m)


def test_matmul_zeros():
    out = matmul(Tensor(np.zeros((2, 3))), Tensor(np.random.default_rng(1).normal(size=(3, 4))))
    npt.assert_array_equal(out.data, np.zeros((2, 4)))


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(3, 3))
    b = rng.normal(size=(3, 3))
    want = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            for k in range(3):
                want[i, j] += a[i, k] * b[k, j]
    got = matmul(Tensor(a), Tensor(b)).data
    assert np.max(np.abs(got - want)) < 1e-12


def test_matmul_batched_matches_per_slice():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(4, 2, 5, 3))
    b = rng.normal(size=(4, 2, 3, 6))
    got = matmul(Tensor(a), Tensor(b)).data
    for i in range(4):
        for j in range(2):
            npt.assert_allclose(got[i, j], a[i, j] @ b[i, j], rtol=0, atol=1e-13)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError) as info:
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    assert "(2, 3)" in str(info.value) and "(4, 5)" in str(info.value)


def conv_reference(x, kernel, stride, padding):
    """Nested-loop cross-correlation, the slow-but-obvious way."""
    if padding:
        x = np.pad(x, ((padding, padding), (padding, padding), (0, 0)))
    k = kernel.shape[0]
    out_h = (x.shape[0] - k) // stride + 1
    out_w = (x.shape[1] - k) // stride + 1
    out = np.zeros((out_h, out_w, kernel.shape[3]))
    for i in range(out_h):
        for j in range(out_w):
            for co in range(kernel.shape[3]):
                for di in range(k):
                    for dj in range(k):
                        for ci in range(x.shape[2]):
                            out[i, j, co] += (x[i * stride + di, j * stride + dj, ci]
                                              * kernel[di, dj, ci, co])
    return out


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv2d_against_nested_loops(stride, padding):
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 5, 2))
    kernel = rng.normal(size=(3, 3, 2, 4))
    got = conv2d(Tensor(x), Tensor(kernel), stride=stride, padding=padding).data
    want = conv_reference(x, kernel, stride, padding)
    assert got.shape == want.shape
    assert np.max(np.abs(got - want)) < 1e-12


def test_conv2d_1x1_equals_channel_matmul():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(6, 7, 3))
    kernel = rng.normal(size=(1, 1, 3, 5))
    got = conv2d(Tensor(x), Tensor(kernel)).data
    want = (x.reshape(-1, 3) @ kernel[0, 0]).reshape(6, 7, 5)
    npt.assert_allclose(got, want, rtol=0, atol=1e-13)


def test_conv2d_ones_kernel_interior():
    x = np.full((5, 5, 2), 0.25)
    kernel = np.ones((3, 3, 2, 1))
    out = conv2d(Tensor(x), Tensor(kernel), padding=1).data
    assert out[2, 2, 0] == pytest.approx(9 * 0.25 * 2)


def test_conv2d_batched_matches_per_sample():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(3, 6, 6, 2))
    kernel = rng.normal(size=(3, 3, 2, 4))
    got = conv2d(Tensor(x), Tensor(kernel), stride=2, padding=1).data
    for i in range(3):
        single = conv2d(Tensor(x[i]), Tensor(kernel), stride=2, padding=1).data
        npt.assert_array_equal(got[i], single)


def test_conv2d_rejects_unsupported_shapes():
    x = Tensor(np.zeros((5, 5, 2)))
    with pytest.raises(ConfigurationError):
        conv2d(x, Tensor(np.zeros((5, 5, 2, 1))))
    with pytest.raises(ConfigurationError):
        conv2d(x, Tensor(np.zeros((3, 3, 2, 1))), stride=3)
    with pytest.raises(ConfigurationError):
        conv2d(x, Tensor(np.zeros((3, 3, 2, 1))), padding=2)
    with pytest.raises(DimensionError):
        conv2d(x, Tensor(np.zeros((3, 3, 9, 1))))


@pytest.mark.parametrize("size,k,stride,padding", [
    (s, k, st, p) for s in (8, 13, 48) for k in (1, 3) for st in (1, 2) for p in (0, 1)
])
def test_conv_output_size_formula(size, k, stride, padding):
    assert conv_output_size(size, k, stride, padding) == (size + 2 * padding - k) // stride + 1


def test_activations_fixed_points():
    out = relu(Tensor(np.array([-1.0, 0.0, 2.0])))
    npt.assert_array_equal(out.data, [0.0, 0.0, 2.0])
    assert sigmoid(Tensor(np.array([0.0]))).data[0] == pytest.approx(0.5)
    # overflow-safe at extreme inputs
    extreme = sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
    assert extreme[0] == pytest.approx(0.0) and extreme[1] == pytest.approx(1.0)


def test_gelu_against_formula():
    for x in (-2.0, -1.0, 0.0, 1.0, 2.0):
        inner = math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)
        want = 0.5 * x * (1.0 + math.tanh(inner))
        got = gelu(Tensor(np.array([x]))).data[0]
        assert abs(got - want) < 1e-9


def test_activation_dispatch():
    x = Tensor(np.array([0.3, -0.7]))
    for kind, fn in (("relu", relu), ("sigmoid", sigmoid), ("gelu", gelu)):
        npt.assert_array_equal(activation(x, kind).data, fn(x).data)
    with pytest.raises(ConfigurationError):
        activation(x, "tanh")


def test_softmax_uniform_and_overflow():
    out = softmax(Tensor(np.zeros((2, 5))))
    npt.assert_allclose(out.data, 0.2, rtol=0, atol=1e-15)
    big = softmax(Tensor(np.array([1000.0, 1000.0, 1000.0])))
    npt.assert_allclose(big.data, 1.0 / 3.0, rtol=0, atol=1e-12)
    assert np.all(np.isfinite(big.data))


def test_softmax_against_naive_formula():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 6))
    got = softmax(Tensor(x), axis=-1).data
    want = np.exp(x) / np.exp(x).sum(axis=-1, keepdims=True)
    assert np.max(np.abs(got - want)) < 1e-12
    npt.assert_allclose(got.sum(axis=-1), 1.0, rtol=0, atol=1e-9)
    assert np.all(got > 0)


def test_layer_norm_constant_row_and_mean():
    gain = Tensor(np.ones(4))
    bias = Tensor(np.zeros(4))
    out = layer_norm(Tensor(np.full((2, 4), 3.7)), gain, bias)
    npt.assert_allclose(out.data, 0.0, rtol=0, atol=1e-9)

    rng = np.random.default_rng(8)
    gain2 = Tensor(rng.normal(size=(4,)))
    bias2 = Tensor(rng.normal(size=(4,)))
    out2 = layer_norm(Tensor(rng.normal(size=(5, 4))), gain2, bias2)
    # per-row mean of (out - bias) vanishes only when gain is constant; the
    # refereed identity is mean(out) == mean(gain*xhat) + mean(bias)
    npt.assert_allclose(out2.data.mean(axis=-1),
                        (out2.data - bias2.data).mean(axis=-1) + bias2.data.mean(),
                        rtol=0, atol=1e-9)


def test_layer_norm_normalizes():
    rng = np.random.default_rng(9)
    x = rng.normal(3.0, 2.0, size=(6, 8))
    out = layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    npt.assert_allclose(out.mean(axis=-1), 0.0, rtol=0, atol=1e-9)
    npt.assert_allclose(out.var(axis=-1), 1.0, rtol=0, atol=1e-4)


def test_cross_entropy_uniform_is_log_classes():
    logits = Tensor(np.zeros((3, 7)))
    assert cross_entropy(logits, [0, 3, 6]).item() == pytest.approx(math.log(7))


def test_cross_entropy_confident_is_near_zero():
    logits = np.full((2, 4), -50.0)
    logits[0, 1] = 50.0
    logits[1, 2] = 50.0
    assert cross_entropy(Tensor(logits), [1, 2]).item() < 1e-9


def test_cross_entropy_against_per_sample_oracle():
    rng = np.random.default_rng(10)
    logits = rng.normal(size=(4, 3))
    labels = [2, 0, 1, 1]
    want = 0.0
    for row, label in zip(logits, labels):
        p = math.exp(row[label]) / sum(math.exp(v) for v in row)
        want -= math.log(p)
    want /= 4
    assert abs(cross_entropy(Tensor(logits), labels).item() - want) < 1e-12


def test_cross_entropy_rejects_bad_labels():
    logits = Tensor(np.zeros((2, 3)))
    with pytest.raises(IndexError):
        cross_entropy(logits, [0, 3])
    with pytest.raises(IndexError):
        cross_entropy(logits, [-1, 0])


def test_elementwise_max_is_pointwise_max():
    rng = np.random.default_rng(11)
    tensors = [Tensor(rng.normal(size=(3, 4))) for _ in range(5)]
    got = elementwise_max(tensors).data
    want = np.maximum.reduce([t.data for t in tensors])
    npt.assert_array_equal(got, want)


# -- gradients ----------------------------------------------------------------


def check_grad(build, params, seed=0):
    """backward() then compare every param against central differences."""
    for p in params:
        p.zero_grad()
    loss = build()
    backward(loss)
    assert finite_difference(build, params, seed=seed) < FD_TOLERANCE


def test_grad_add_mul_broadcast():
    rng = np.random.default_rng(20)
    a = parameter(rng.normal(size=(3, 4)))
    b = parameter(rng.normal(size=(4,)))
    check_grad(lambda: tensor_sum(mul(add(a, b), add(a, 2.0))), [a, b])


def test_grad_matmul_batched():
    rng = np.random.default_rng(21)
    a = parameter(rng.normal(size=(2, 3, 4)))
    b = parameter(rng.normal(size=(2, 4, 5)))
    check_grad(lambda: tensor_sum(matmul(a, b)), [a, b])


def test_grad_matmul_broadcast_left():
    rng = np.random.default_rng(22)
    a = parameter(rng.normal(size=(5, 3)))
    b = parameter(rng.normal(size=(3, 2)))
    check_grad(lambda: tensor_sum(mul(matmul(a, b), 0.7)), [a, b])


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_grad_conv2d(stride, padding):
    rng = np.random.default_rng(23)
    x = parameter(rng.normal(size=(5, 5, 2)))
    kernel = parameter(rng.normal(size=(3, 3, 2, 3)))
    check_grad(lambda: tensor_sum(conv2d(x, kernel, stride=stride, padding=padding)),
               [x, kernel])


def test_grad_conv2d_batched_1x1():
    rng = np.random.default_rng(24)
    x = parameter(rng.normal(size=(2, 4, 4, 3)))
    kernel = parameter(rng.normal(size=(1, 1, 3, 2)))
    check_grad(lambda: tensor_sum(conv2d(x, kernel)), [x, kernel])


@pytest.mark.parametrize("fn", [relu, sigmoid, gelu])
def test_grad_activations(fn):
    rng = np.random.default_rng(25)
    # keep relu inputs away from the kink at 0
    x = parameter(np.sign(rng.normal(size=(4, 5))) * (0.5 + rng.random((4, 5))))
    check_grad(lambda: tensor_sum(fn(x)), [x])


def test_grad_softmax():
    rng = np.random.default_rng(26)
    x = parameter(rng.normal(size=(3, 6)))
    w = rng.normal(size=(3, 6))  # fixed weights make the loss non-trivial
    check_grad(lambda: tensor_sum(mul(softmax(x), w)), [x])


def test_grad_layer_norm():
    rng = np.random.default_rng(27)
    x = parameter(rng.normal(size=(3, 5)))
    gain = parameter(rng.normal(size=(5,)))
    bias = parameter(rng.normal(size=(5,)))
    w = rng.normal(size=(3, 5))
    check_grad(lambda: tensor_sum(mul(layer_norm(x, gain, bias), w)), [x, gain, bias])


def test_grad_cross_entropy():
    rng = np.random.default_rng(28)
    x = parameter(rng.normal(size=(4, 3)))
    labels = [0, 2, 1, 2]
    check_grad(lambda: cross_entropy(x, labels), [x])


def test_grad_structural_ops():
    rng = np.random.default_rng(29)
    x = parameter(rng.normal(size=(2, 3, 4)))
    w = rng.normal(size=(4, 3, 2))

    def build():
        return tensor_sum(mul(transpose(reshape(x, (2, 3, 4)), (2, 1, 0)), w))

    check_grad(build, [x])


def test_grad_concat_select_expand():
    rng = np.random.default_rng(30)
    a = parameter(rng.normal(size=(2, 3)))
    b = parameter(rng.normal(size=(2, 3)))
    w = rng.normal(size=(4, 3))

    def build():
        joined = concat([a, b], axis=0)           # (4, 3)
        row = select(joined, 0, 1)                # (3,)
        back = expand(reshape(row, (1, 3)), (4, 3))
        return tensor_sum(mul(add(joined, back), w))

    check_grad(build, [a, b])


def test_grad_mean_and_sum_axes():
    rng = np.random.default_rng(31)
    x = parameter(rng.normal(size=(3, 4, 2)))
    check_grad(lambda: tensor_sum(mul(mean(x, axis=1), 3.0)), [x])
    check_grad(lambda: tensor_sum(tensor_sum(x, axis=(0, 2))), [x])


def test_grad_elementwise_max_routes_to_winner():
    a = parameter(np.array([1.0, 5.0]))
    b = parameter(np.array([3.0, 2.0]))
    loss = tensor_sum(elementwise_max([a, b]))
    backward(loss)
    npt.assert_array_equal(a.grad, [0.0, 1.0])
    npt.assert_array_equal(b.grad, [1.0, 0.0])


def test_grad_elementwise_max_tie_goes_to_first():
    a = parameter(np.array([2.0]))
    b = parameter(np.array([2.0]))
    backward(tensor_sum(elementwise_max([a, b])))
    assert a.grad[0] == 1.0 and b.grad[0] == 0.0


# -- backward bookkeeping -----------------------------------------------------


def test_backward_sum_gives_ones():
    x = parameter(np.arange(6.0).reshape(2, 3))
    backward(tensor_sum(x))
    npt.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_unused_param_grad_is_zero():
    x = parameter(np.ones(3))
    unused = parameter(np.ones(4))
    backward(tensor_sum(x))
    npt.assert_array_equal(unused.grad, np.zeros(4))


def test_backward_accumulates_across_uses():
    x = parameter(np.array([1.5, -2.0]))
    backward(tensor_sum(add(x, x)))
    npt.assert_array_equal(x.grad, [2.0, 2.0])


def test_backward_rejects_non_scalar():
    x = parameter(np.ones((2, 2)))
    with pytest.raises(UsageError):
        backward(add(x, 1.0))


def test_backward_twice_restarts_from_fresh_loss():
    x = parameter(np.array([3.0]))
    backward(tensor_sum(mul(x, 2.0)))
    backward(tensor_sum(mul(x, 2.0)))
    npt.assert_array_equal(x.grad, [4.0])  # two backwards accumulate


def test_no_grad_blocks_recording():
    x = parameter(np.ones(3))
    with no_grad():
        out = mul(x, 2.0)
    assert not out.requires_grad
    with pytest.raises(UsageError):
        backward(tensor_sum(out))


def test_division_by_tensor_rejected():
    x = parameter(np.ones(2))
    with pytest.raises(UsageError):
        _ = x / x
    npt.assert_array_equal((x / 2.0).data, [0.5, 0.5])


# -- optimizer ----------------------------------------------------------------


def test_sgd_step_no_momentum():
    p = parameter(np.array([1.0, 2.0]))
    p.grad[...] = [0.5, -1.0]
    sgd_momentum_step([p], make_velocities([p]), lr=0.1, momentum=0.0)
    npt.assert_allclose(p.data, [1.0 - 0.05, 2.0 + 0.1])
    npt.assert_array_equal(p.grad, [0.0, 0.0])  # cleared after the step


def test_sgd_zero_grad_keeps_params():
    p = parameter(np.array([4.0]))
    sgd_momentum_step([p], make_velocities([p]), lr=0.5, momentum=0.9)
    npt.assert_array_equal(p.data, [4.0])


def test_sgd_two_steps_momentum_09():
    # fixed grad g: step 1 moves lr*g, step 2 moves lr*(0.9+1)*g
    p = parameter(np.array([0.0]))
    v = make_velocities([p])
    g = 2.0
    p.grad[...] = g
    sgd_momentum_step([p], v, lr=0.1, momentum=0.9)
    assert p.data[0] == pytest.approx(-0.1 * g)
    p.grad[...] = g
    sgd_momentum_step([p], v, lr=0.1, momentum=0.9)
    assert p.data[0] == pytest.approx(-0.1 * g - 0.1 * 1.9 * g)


def test_sgd_mismatched_velocities_rejected():
    p = parameter(np.ones(2))
    with pytest.raises(UsageError):
        sgd_momentum_step([p], [], lr=0.1, momentum=0.9)


# -- serialization -------------------------------------------------------------


def test_tensor_bytes_round_trip_bitwise():
    rng = np.random.default_rng(40)
    for shape in ((), (4,), (2, 3), (2, 3, 4, 5)):
        original = rng.normal(size=shape)
        blob = write_tensor_bytes(original)
        assert blob[:4] == b"TFT1"
        restored, consumed = read_tensor_bytes(blob, 0)
        assert consumed == len(blob)
        assert restored.shape == original.shape
        npt.assert_array_equal(restored, np.asarray(original))


def test_tensor_file_round_trip(tmp_path):
    data = np.random.default_rng(41).normal(size=(3, 7))
    save_tensor(tmp_path / "t.tft", data)
    npt.assert_array_equal(load_tensor(tmp_path / "t.tft"), data)


def test_tensor_bytes_rejects_bad_magic():
    with pytest.raises(Exception):
        read_tensor_bytes(b"NOPE" + bytes(16), 0)


def test_tensor_wrapper_basics():
    t = as_tensor([[1.0, 2.0]])
    assert t.shape == (1, 2) and t.ndim == 2 and t.size == 2
    assert as_tensor(t) is t
    assert t.detach().requires_grad is False
    assert "Tensor" in repr(t)
