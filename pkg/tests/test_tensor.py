import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnppo import tensor as T
from attnppo.tensor import DimensionError, GraphError, NumericError, Tensor, grad_check
from attnppo.verification import primitive_cases


# -- forward examples ---------------------------------------------------------
def test_conv_output_shape_atari_first_layer():
    x = Tensor(np.random.default_rng(0).random((1, 84, 84)))
    k = Tensor(np.zeros((32, 1, 8, 8)))
    assert T.conv2d(x, k, stride=4).shape == (32, 20, 20)


def test_conv_zero_kernel_gives_zero():
    x = Tensor(np.random.default_rng(1).standard_normal((2, 3, 11, 11)))
    out = T.conv2d(x, Tensor(np.zeros((5, 3, 3, 3))), Tensor(np.zeros(5)), stride=2)
    assert np.all(out.data == 0)


def test_conv_ones_window_sums():
    out = T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 4.0))


def _conv_reference(x, k, b, s):
    n, c, h, w = x.shape
    co, _, kh, kw = k.shape
    ho, wo = (h - kh) // s + 1, (w - kw) // s + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = x[:, :, i * s : i * s + kh, j * s : j * s + kw]
            out[:, :, i, j] = np.einsum("nchw,ochw->no", patch, k) + b
    return out


@settings(max_examples=40, deadline=None)
@given(
    h=st.integers(1, 12),
    w=st.integers(1, 12),
    kh=st.integers(1, 5),
    kw=st.integers(1, 5),
    stride=st.integers(1, 4),
    seed=st.integers(0, 10_000),
)
def test_conv_shape_formula_and_values(h, w, kh, kw, stride, seed):
    if kh > h or kw > w:
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.zeros((1, 2, h, w))), Tensor(np.zeros((3, 2, kh, kw))), stride=stride)
        return
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, h, w))
    k = rng.standard_normal((3, 2, kh, kw))
    b = rng.standard_normal(3)
    out = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride)
    assert out.shape == (2, 3, (h - kh) // stride + 1, (w - kw) // stride + 1)
    np.testing.assert_allclose(out.data, _conv_reference(x, k, b, stride), atol=1e-12)


def test_conv_rejects_bad_stride_and_channels():
    x = Tensor(np.zeros((1, 2, 5, 5)))
    with pytest.raises(ValueError):
        T.conv2d(x, Tensor(np.zeros((1, 2, 2, 2))), stride=0)
    with pytest.raises(DimensionError):
        T.conv2d(x, Tensor(np.zeros((1, 3, 2, 2))))


def test_matmul_examples():
    b = np.random.default_rng(2).standard_normal((3, 7))
    np.testing.assert_array_equal((Tensor(np.eye(3)) @ Tensor(b)).data, b)
    assert np.all((Tensor(np.zeros((2, 3))) @ Tensor(b)).data == 0)
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[5.0], [6.0]])
    np.testing.assert_array_equal(out.data, [[17.0], [39.0]])
    with pytest.raises(DimensionError):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))


def test_softmax_examples():
    np.testing.assert_array_equal(T.softmax(Tensor(np.zeros(4))).data, np.full(4, 0.25))
    out = T.softmax(Tensor(np.log([1.0, 2.0, 3.0]))).data
    np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), shift=st.floats(-50, 50), n=st.integers(1, 9))
def test_softmax_rows_sum_to_one_and_shift_invariant(seed, shift, n):
    x = np.random.default_rng(seed).standard_normal((3, n)) * 5
    s = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(T.softmax(Tensor(x + shift)).data, s, atol=1e-12)


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        T.softmax(Tensor([0.0, np.nan]))


def test_relu_examples():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, -3.0])).data, [0.0, 0.0])
    np.testing.assert_array_equal(T.relu(Tensor([1.0, 3.0])).data, [1.0, 3.0])
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.5])).data, [0.0, 0.0, 2.5])


def test_bilinear_examples():
    const = T.bilinear_resize(Tensor(np.full((5, 9), 7.0)), 13, 2).data
    np.testing.assert_allclose(const, 7.0, atol=1e-12)
    x = np.random.default_rng(3).standard_normal((2, 6, 4))
    np.testing.assert_allclose(T.bilinear_resize(Tensor(x), 6, 4).data, x, atol=1e-12)
    np.testing.assert_allclose(T.bilinear_resize(Tensor([[0.0, 1.0]]), 1, 3).data, [[0.0, 0.5, 1.0]])
    with pytest.raises(ValueError):
        T.bilinear_resize(Tensor(x), 0, 3)


# -- gradients ------------------------------------------------------------------
def test_backward_of_sum_is_ones():
    x = Tensor(np.random.default_rng(4).standard_normal((2, 3, 4)), requires_grad=True)
    with T.Tape() as tape:
        loss = x.sum()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_zero_times_anything_has_zero_gradient():
    x = Tensor(np.random.default_rng(5).standard_normal(6), requires_grad=True)
    with T.Tape() as tape:
        loss = T.tsum(T.exp(x)) * 0.0
    (g,) = tape.gradient(loss, [x])
    np.testing.assert_array_equal(g, np.zeros(6))


def test_relu_subgradient_convention():
    x = Tensor([-1.0, 2.0, 0.0], requires_grad=True)
    with T.Tape() as tape:
        loss = T.tsum(T.relu(x))
    (g,) = tape.gradient(loss, [x])
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])


def test_fan_out_accumulates_both_paths():
    x = Tensor([0.3, -1.2, 2.0], requires_grad=True)
    with T.Tape() as tape:
        a = x * 3.0
        loss = T.tsum(a * a) + T.tsum(a)
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 18 * x.data + 3.0)
    assert grad_check(lambda t: T.tsum((t * 3.0) * (t * 3.0)) + T.tsum(t * 3.0), x.data) < 1e-8


def test_backward_twice_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        with T.Tape() as tape:
            loss = T.tsum(x * x)
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, 4 * x.data)
    x.zero_grad()
    assert x.grad is None


def test_backward_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        y = x * 2.0
    with pytest.raises(DimensionError):
        tape.backward(y)
    outside = T.tsum(x * 2.0)
    with pytest.raises(GraphError):
        tape.backward(outside)


def test_no_recording_without_tape():
    x = Tensor([1.0], requires_grad=True)
    y = x * 2.0
    assert y.requires_grad is False


def test_grad_check_examples():
    x = np.random.default_rng(6).standard_normal((3, 4))
    assert grad_check(lambda t: T.tsum(t * t), x) < 1e-6
    assert grad_check(lambda t: Tensor(3.0) + T.tsum(t) * 0.0, x) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_every_primitive_passes_grad_check(seed):
    failures = {}
    for name, f, x in primitive_cases(np.random.default_rng(seed)):
        err = grad_check(f, x)
        if not err < 1e-4:
            failures[name] = err
    assert not failures


def test_attention_matches_unfused_reference():
    rng = np.random.default_rng(7)
    q, k, v = (rng.standard_normal((2, 4, 13)) for _ in range(3))
    out, w = T.attention(Tensor(q), Tensor(k), Tensor(v), chunk=5)
    logits = np.einsum("ndp,ndq->npq", q, k)
    ref_w = np.exp(logits - logits.max(-1, keepdims=True))
    ref_w /= ref_w.sum(-1, keepdims=True)
    np.testing.assert_allclose(w.data, ref_w, atol=1e-12)
    np.testing.assert_allclose(out.data, np.einsum("ndq,npq->ndp", v, ref_w), atol=1e-12)


def test_attention_non_finite_raises():
    q = np.zeros((1, 2, 3))
    q[0, 0, 1] = np.inf
    with pytest.raises(NumericError):
        T.attention(Tensor(q), Tensor(np.ones((1, 2, 3))), Tensor(np.ones((1, 2, 3))))
