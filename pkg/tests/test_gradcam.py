import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnppo import tensor as T
from attnppo.gradcam import (
    action_map,
    grad_cam,
    importance_from_head,
    neuron_importance,
    normalize_map,
    peak_location,
    render_overlay,
)
from attnppo.networks import OBS_SHAPE, build_network, net_forward
from attnppo.tensor import Tensor


def _obs(seed):
    return np.random.default_rng(seed).uniform(0, 1, OBS_SHAPE)


def _bilinear_loops(img, size):
    """Align-corners bilinear upsampling written pointwise."""
    h, w = img.shape
    out = np.zeros((size, size))
    for r in range(size):
        y = r * (h - 1) / (size - 1) if size > 1 else 0.0
        y0 = min(int(np.floor(y)), h - 2) if h > 1 else 0
        fy = y - y0
        for c in range(size):
            x = c * (w - 1) / (size - 1) if size > 1 else 0.0
            x0 = min(int(np.floor(x)), w - 2) if w > 1 else 0
            fx = x - x0
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            out[r, c] = (
                img[y0, x0] * (1 - fy) * (1 - fx)
                + img[y0, x1] * (1 - fy) * fx
                + img[y1, x0] * fy * (1 - fx)
                + img[y1, x1] * fy * fx
            )
    return out


class ToyNet:
    """conv(3x3) -> ReLU -> L [K, 5, 5] -> dense(ReLU) -> scores."""

    def __init__(self, seed, k=6, hidden=10, actions=4):
        rng = np.random.default_rng(seed)
        self.kernel = rng.standard_normal((k, 2, 3, 3)) * 0.5
        self.w1 = rng.standard_normal((hidden, k * 25)) * 0.3
        self.b1 = rng.standard_normal(hidden) * 0.1
        self.w2 = rng.standard_normal((actions, hidden))
        self.x = rng.standard_normal((2, 7, 7))

    def activations(self):
        return T.relu(T.conv2d(Tensor(self.x), Tensor(self.kernel))).data

    def head(self, acts: Tensor) -> Tensor:
        flat = acts.reshape(acts.shape[0], -1)
        hidden = T.relu(T.linear(flat, Tensor(self.w1), Tensor(self.b1)))
        return T.linear(hidden, Tensor(self.w2))

    def head_numpy(self, acts: np.ndarray) -> np.ndarray:
        hidden = np.maximum(self.w1 @ acts.ravel() + self.b1, 0.0)
        return self.w2 @ hidden


def _fd_alpha(score, acts, eps=1e-6):
    alpha = np.zeros(acts.shape[0])
    for k in range(acts.shape[0]):
        total = 0.0
        for i in range(acts.shape[1]):
            for j in range(acts.shape[2]):
                up, down = acts.copy(), acts.copy()
                up[k, i, j] += eps
                down[k, i, j] -= eps
                total += (score(up) - score(down)) / (2 * eps)
        alpha[k] = total / (acts.shape[1] * acts.shape[2])
    return alpha


# -- neuron importance --------------------------------------------------------
def test_alpha_zero_when_logit_ignores_activations():
    net = build_network("BASELINE", 4, 0, dtype=np.float64)
    net.params["fc/kernel"].data[...] = 0.0
    np.testing.assert_array_equal(neuron_importance(net, _obs(0), 2), np.zeros(64))


@pytest.mark.parametrize("c,k0", [(2.5, 3), (-0.7, 0)])
def test_alpha_for_linear_heads(c, k0):
    acts = np.random.default_rng(1).uniform(0, 1, (5, 7, 7))

    def mean_head(a):
        return T.mean(a[:, k0].reshape(1, 49), axis=1).reshape(1, 1) * c

    def sum_head(a):
        return T.tsum(a[:, k0].reshape(1, 49), axis=1).reshape(1, 1) * c

    expected = np.zeros(5)
    expected[k0] = c / 49
    assert np.max(np.abs(importance_from_head(mean_head, acts, 0) - expected)) < 1e-10
    expected[k0] = c
    assert np.max(np.abs(importance_from_head(sum_head, acts, 0) - expected)) < 1e-10


def test_alpha_matches_finite_differences_on_full_network():
    net = build_network("BASELINE", 4, 3, dtype=np.float64)
    net.params["pi/kernel"].data *= 100
    obs = _obs(3)
    acts = net_forward(net, obs).activations.data
    alpha = neuron_importance(net, obs, 1, acts)
    score = lambda a: net.head(Tensor(a[None]))[0].data[0, 1]
    np.testing.assert_allclose(alpha, _fd_alpha(score, acts), atol=1e-4)


def test_alpha_is_linear_in_head_weights():
    net = build_network("SAN", 4, 5, dtype=np.float64)
    obs = _obs(5)
    acts = net_forward(net, obs).activations.data
    w = net.params["pi/kernel"].data
    base = neuron_importance(net, obs, 2, acts)
    w[2] *= -3.0
    np.testing.assert_allclose(neuron_importance(net, obs, 2, acts), -3.0 * base, rtol=1e-9, atol=1e-15)
    w0 = w[2].copy()
    extra = np.random.default_rng(0).standard_normal(w.shape[1]) * 0.01
    w[2] = extra
    a_extra = neuron_importance(net, obs, 2, acts)
    w[2] = w0 + extra
    np.testing.assert_allclose(neuron_importance(net, obs, 2, acts), -3.0 * base + a_extra, rtol=1e-9, atol=1e-15)


def test_bad_action_raises():
    net = build_network("BASELINE", 4, 0)
    with pytest.raises(ValueError):
        neuron_importance(net, _obs(0), 4)
    with pytest.raises(ValueError):
        grad_cam(net, _obs(0), -1)


# -- action maps --------------------------------------------------------------------
def test_zero_alpha_gives_zero_map():
    amap = action_map(np.zeros(3), np.random.default_rng(0).uniform(0, 1, (3, 7, 7)))
    assert np.all(amap.map == 0) and np.all(amap.upsampled == 0)


def test_single_negative_channel_is_rectified():
    acts = np.zeros((2, 7, 7))
    acts[0] = -np.random.default_rng(0).uniform(0.1, 1, (7, 7))
    amap = action_map(np.array([1.0, 0.0]), acts)
    assert np.all(amap.map == 0)


def test_hand_computed_two_channel_map():
    acts = np.array([[[1.0, 2.0], [3.0, 4.0]], [[2.0, 0.0], [1.0, 5.0]]])
    amap = action_map(np.array([1.0, -1.0]), acts, size=3)
    np.testing.assert_array_equal(amap.map, [[0.0, 2.0], [2.0, 0.0]])
    np.testing.assert_allclose(amap.upsampled, [[0, 1, 2], [1, 1, 1], [2, 1, 0]], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_map_zero_exactly_where_weighted_sum_nonpositive(seed):
    rng = np.random.default_rng(seed)
    acts = rng.standard_normal((6, 7, 7))
    alpha = rng.standard_normal(6)
    amap = action_map(alpha, acts)
    pre = np.tensordot(alpha, acts, axes=1)
    assert np.all(amap.map[pre <= 0] == 0)
    np.testing.assert_allclose(amap.map[pre > 0], pre[pre > 0])
    assert amap.map.min() >= 0 and amap.upsampled.min() >= 0
    assert amap.upsampled.shape == (84, 84)


def test_action_map_shape_mismatch():
    with pytest.raises(ValueError):
        action_map(np.zeros(3), np.zeros((4, 7, 7)))


@pytest.mark.parametrize("seed", range(3))
def test_toy_network_map_matches_finite_difference_construction(seed):
    toy = ToyNet(seed)
    acts = toy.activations()
    for a in range(4):
        alpha = importance_from_head(toy.head, acts, a)
        fd = _fd_alpha(lambda x: toy.head_numpy(x)[a], acts)
        np.testing.assert_allclose(alpha, fd, atol=1e-6)
        ours = action_map(alpha, acts, a, size=21).upsampled
        oracle = _bilinear_loops(np.maximum(np.tensordot(fd, acts, axes=1), 0.0), 21)
        assert np.max(np.abs(ours - oracle)) < 1e-3


def test_grad_cam_defaults_to_greedy_action():
    net = build_network("SAN", 5, 2)
    obs = _obs(2)
    amap = grad_cam(net, obs)
    assert amap.action == int(np.argmax(net_forward(net, obs).logits.data))


# -- overlays -----------------------------------------------------------------------------
def test_normalize_map():
    assert np.all(normalize_map(np.full((4, 4), 3.0)) == 0)
    out = normalize_map(np.array([[0.0, 1.0], [2.0, 4.0]]))
    np.testing.assert_array_equal(out, [[0, 64], [128, 255]])


def test_zero_map_overlay_is_gray_base():
    obs = _obs(0).astype(np.float32)
    amap = action_map(np.zeros(2), np.ones((2, 7, 7)))
    img = render_overlay(amap, obs)
    base = np.rint(obs[-1] * 255).astype(np.uint8)
    for ch in range(3):
        np.testing.assert_array_equal(img[:, :, ch], base)


def test_saturated_overlay_does_not_wrap():
    obs = np.ones(OBS_SHAPE)
    acts = np.zeros((1, 7, 7))
    acts[0, 3, 3] = 1.0
    img = render_overlay(action_map(np.ones(1), acts), obs)
    assert np.all(img[:, :, 0] == 255)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_overlay_only_touches_red(seed):
    rng = np.random.default_rng(seed)
    obs = rng.uniform(0, 1, OBS_SHAPE)
    amap = action_map(rng.standard_normal(3), rng.uniform(0, 1, (3, 7, 7)))
    img = render_overlay(amap, obs)
    base = np.rint(obs[-1] * 255).astype(np.uint8)
    np.testing.assert_array_equal(img[:, :, 1], base)
    np.testing.assert_array_equal(img[:, :, 2], base)
    assert np.all(img[:, :, 0] >= base)
    r, c = peak_location(amap)
    assert amap.upsampled[r, c] == amap.upsampled.max()
