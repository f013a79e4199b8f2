"""Finite-difference verification of every primitive and every network variant.

All checks run in float64. A network check perturbs a random subset of
coordinates of the observation and of each parameter tensor and compares
against the tape gradient of a fixed random projection of (logits, value).
"""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .networks import OBS_SHAPE, NetworkVariant, build_network, net_forward
from .tensor import Tensor, grad_check


def _proj(rng: np.random.Generator, shape) -> Callable[[Tensor], Tensor]:
    """Random linear functional, so the checked scalar depends on every output."""
    w = rng.standard_normal(shape)
    return lambda y: T.tsum(y * Tensor(w))


def _away_from(rng, shape, points=(0.0,), gap=0.05) -> np.ndarray:
    """Normal samples pushed off the kinks of piecewise ops."""
    x = rng.standard_normal(shape)
    for p in points:
        near = np.abs(x - p) < gap
        x[near] = p + np.sign(x[near] - p + 1e-12) * gap * 2
    return x


def primitive_cases(rng: np.random.Generator) -> Iterator[tuple[str, Callable[[Tensor], Tensor], np.ndarray]]:
    """(name, scalar function of x, x) for each differentiable op and argument."""
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    row = rng.standard_normal(4)
    pos = rng.uniform(0.5, 2.0, (3, 4))
    p = _proj(rng, (3, 4))

    yield "add[a]", lambda x: p(x + Tensor(row)), a
    yield "add[b,broadcast]", lambda x: p(Tensor(a) + x), row
    yield "sub[a]", lambda x: p(x - Tensor(b)), a
    yield "sub[b]", lambda x: p(Tensor(a) - x), b
    yield "mul[a]", lambda x: p(x * Tensor(b)), a
    yield "mul[b,broadcast]", lambda x: p(Tensor(a) * x), row
    yield "div[a]", lambda x: p(x / Tensor(pos)), a
    yield "div[b]", lambda x: p(Tensor(a) / x), pos
    yield "neg", lambda x: p(-x), a
    yield "exp", lambda x: p(T.exp(x)), a
    yield "log", lambda x: p(T.log(x)), pos
    yield "square", lambda x: p(T.square(x)), a
    yield "relu", lambda x: p(T.relu(x)), _away_from(rng, (3, 4))
    yield "clip", lambda x: p(T.clip(x, -0.5, 0.5)), _away_from(rng, (3, 4), (-0.5, 0.5))
    gap = _away_from(rng, (3, 4))
    yield "minimum[a]", lambda x: p(T.minimum(x, Tensor(a + gap))), a
    yield "minimum[b]", lambda x: p(T.minimum(Tensor(a), x)), a + gap
    yield "maximum[a]", lambda x: p(T.maximum(x, Tensor(a + gap))), a
    yield "maximum[b]", lambda x: p(T.maximum(Tensor(a), x)), a + gap
    pc = _proj(rng, (4,))
    yield "sum[axis=0]", lambda x: pc(T.tsum(x, axis=0)), a
    yield "sum[all]", lambda x: T.tsum(x) * T.tsum(x), a
    yield "mean[axis=1]", lambda x: _proj(np.random.default_rng(1), (3,))(T.mean(x, axis=1)), a
    yield "reshape", lambda x: _proj(np.random.default_rng(2), (2, 6))(x.reshape(2, 6)), a
    yield "transpose", lambda x: _proj(np.random.default_rng(3), (4, 3))(x.transpose()), a
    yield "getitem[repeat]", lambda x: _proj(np.random.default_rng(4), (4, 4))(x[np.array([0, 2, 2, 1])]), a
    idx = rng.integers(0, 4, size=3)
    yield "take_along_last", lambda x: _proj(np.random.default_rng(5), (3,))(T.take_along_last(x, idx)), a

    m = rng.standard_normal((4, 5))
    yield "matmul2d[a]", lambda x: _proj(np.random.default_rng(6), (3, 5))(x @ Tensor(m)), a
    yield "matmul2d[b]", lambda x: _proj(np.random.default_rng(6), (3, 5))(Tensor(a) @ x), m
    a3 = rng.standard_normal((2, 3, 4))
    b3 = rng.standard_normal((2, 4, 5))
    p3 = _proj(rng, (2, 3, 5))
    yield "matmul3d[a]", lambda x: p3(T.matmul(x, Tensor(b3))), a3
    yield "matmul3d[b]", lambda x: p3(T.matmul(Tensor(a3), x)), b3
    w = rng.standard_normal((5, 4))
    bias = rng.standard_normal(5)
    pl = _proj(rng, (3, 5))
    yield "linear[x]", lambda x: pl(T.linear(x, Tensor(w), Tensor(bias))), a
    yield "linear[w]", lambda x: pl(T.linear(Tensor(a), x, Tensor(bias))), w
    yield "linear[b]", lambda x: pl(T.linear(Tensor(a), Tensor(w), x)), bias
    yield "softmax", lambda x: p(T.softmax(x)), a
    yield "log_softmax", lambda x: p(T.log_softmax(x)), a

    img = rng.standard_normal((2, 3, 9, 9))
    ker = rng.standard_normal((4, 3, 3, 3))
    kb = rng.standard_normal(4)
    pc1 = _proj(rng, (2, 4, 7, 7))
    pc2 = _proj(rng, (2, 4, 4, 4))
    yield "conv2d[x]", lambda x: pc1(T.conv2d(x, Tensor(ker), Tensor(kb))), img
    yield "conv2d[kernel]", lambda x: pc1(T.conv2d(Tensor(img), x, Tensor(kb))), ker
    yield "conv2d[bias]", lambda x: pc1(T.conv2d(Tensor(img), Tensor(ker), x)), kb
    yield "conv2d[x,stride2]", lambda x: pc2(T.conv2d(x, Tensor(ker), stride=2)), img
    yield "conv2d[kernel,stride2]", lambda x: pc2(T.conv2d(Tensor(img), x, stride=2)), ker
    k1 = rng.standard_normal((2, 3, 1, 1))
    pc3 = _proj(rng, (2, 2, 9, 9))
    yield "conv2d[x,1x1]", lambda x: pc3(T.conv2d(x, Tensor(k1))), img
    yield "conv2d[kernel,1x1]", lambda x: pc3(T.conv2d(Tensor(img), x)), k1

    q, k, v = (rng.standard_normal((2, 3, 10)) for _ in range(3))
    pa = _proj(rng, (2, 3, 10))
    yield "attention[query]", lambda x: pa(T.attention(x, Tensor(k), Tensor(v), chunk=4)[0]), q
    yield "attention[key]", lambda x: pa(T.attention(Tensor(q), x, Tensor(v), chunk=4)[0]), k
    yield "attention[value]", lambda x: pa(T.attention(Tensor(q), Tensor(k), x, chunk=4)[0]), v
    small = rng.standard_normal((2, 5, 6))
    yield "bilinear_resize", lambda x: _proj(np.random.default_rng(7), (2, 9, 4))(T.bilinear_resize(x, 9, 4)), small
    yield "fan_out", lambda x: p(x * x + T.exp(x) * x - x), a


def randomized_network(variant, num_actions: int, seed: int):
    """Float64 network with every parameter nonzero and heads at unit scale.

    Initial zero biases, a zero block output projection and a 0.01-gain
    policy head would all leave parts of the graph untested.
    """
    net = build_network(variant, num_actions, seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 99])
    for name, p in net.params.items():
        if name.endswith("bias") or "/b_" in name:
            p.data[...] = rng.normal(0.0, 0.05, p.shape)
        elif name.endswith("w_out"):
            p.data[...] = rng.normal(0.0, 0.3, p.shape)
        elif name == "pi/kernel":
            p.data *= 100.0
    return net


def network_checks(variant, seed: int, coords: int = 12, num_actions: int = 5, eps: float = 1e-7) -> Iterator[tuple[str, float]]:
    """Max error over observation coordinates and every parameter tensor.

    The step is smaller than for single ops: a conv bias shifts hundreds of
    ReLU inputs at once, and a 1e-5 step regularly pushes one across its
    kink. In float64 a 1e-7 step still leaves rounding error near 1e-8.
    """
    net = randomized_network(variant, num_actions, seed)
    rng = np.random.default_rng([seed, 7])
    obs = rng.uniform(0.0, 1.0, OBS_SHAPE)
    wl = rng.standard_normal(num_actions)
    wv = float(rng.standard_normal())

    def scalar(out) -> Tensor:
        return T.tsum(out.logits * Tensor(wl)) + out.value * Tensor(wv)

    name = NetworkVariant.parse(variant).value
    yield f"{name}/seed{seed}/obs", grad_check(lambda x: scalar(net_forward(net, x)), obs, eps=eps, coords=coords, rng=rng)
    worst = 0.0
    for key in net.params:
        original = net.params[key]

        def f(x, key=key):
            net.params[key] = x
            try:
                return scalar(net_forward(net, Tensor(obs)))
            finally:
                net.params[key] = original

        worst = max(worst, grad_check(f, original.data, eps=eps, coords=max(2, coords // 4), rng=rng))
    yield f"{name}/seed{seed}/params", worst


def run_suite(seeds: int = 5, coords: int = 12) -> list[tuple[str, float]]:
    """Every primitive case, then every variant for `seeds` seeds."""
    results = [(f"op/{name}", grad_check(f, x)) for name, f, x in primitive_cases(np.random.default_rng(0))]
    for variant in NetworkVariant:
        for seed in range(seeds):
            results.extend(network_checks(variant, seed, coords))
    return results
