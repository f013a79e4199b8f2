"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the policy networks, the PPO loss and Grad-CAM need are
provided. Arrays are plain numpy arrays; the tape records a backward closure
per operation while it is active, so inference outside a tape costs nothing
extra.

Example::

    x = Tensor(np.ones((2, 3)), requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    x.grad  # 2 * x
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided


class DimensionError(ValueError):
    """Operand shapes are incompatible with the operation."""


class GraphError(RuntimeError):
    """Backward was requested through a tensor the tape never recorded."""


class NumericError(FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional array with an optional gradient accumulator."""

    __array_priority__ = 100
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    # -- conveniences -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Records operations in execution order for one backward traversal.

    Used as a context manager; operations on tensors that require gradients
    are recorded on the innermost active tape. Tapes are thread-local.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self.nodes.append(_Node(out, inputs, backward))
        self._produced.add(id(out))

    def _propagate(self, loss: Tensor, seed: np.ndarray | None) -> dict[int, np.ndarray]:
        if id(loss) not in self._produced:
            raise GraphError("loss was not produced by an operation recorded on this tape")
        if seed is None:
            if loss.size != 1:
                raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=loss.dtype)}
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
        return grads

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Return d(loss)/d(t) for each t in `wrt` without touching `.grad`."""
        grads = self._propagate(loss, seed)
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]

    def backward(self, loss: Tensor, seed=None) -> None:
        """Accumulate d(loss)/d(t) into `.grad` of every tensor that requires it."""
        grads = self._propagate(loss, seed)
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                seen[id(t)] = t
            seen[id(node.out)] = node.out
        for key, g in grads.items():
            t = seen.get(key)
            if t is None or not t.requires_grad:
                continue
            g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _finish(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape.record(out, inputs, backward)
        return out
    return Tensor(data)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape
    return _finish(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape
    return _finish(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _finish(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)
    ad, bd = a.data, b.data
    return _finish(
        ad / bd,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _finish(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _finish(np.log(xd), (x,), lambda g: (g / xd,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _finish(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the gradient at exactly zero is zero."""
    mask = x.data > 0
    return _finish(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    mask = (xd >= lo) & (xd <= hi)
    return _finish(np.clip(xd, lo, hi), (x,), lambda g: (g * mask,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    # ties route the gradient to `a`
    pick_a = a.data <= b.data
    return _finish(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


def maximum(a: Tensor, b: Tensor) -> Tensor:
    pick_a = a.data >= b.data
    return _finish(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


# -- reductions and shape ---------------------------------------------------
def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _finish(np.asarray(x.data.sum(axis=axis)), (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _finish(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _finish(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _finish(np.asarray(x.data[idx]), (x,), bw)


def take_along_last(x: Tensor, index: np.ndarray) -> Tensor:
    """out[n] = x[n, index[n]] for a 2-D `x`."""
    index = np.asarray(index, dtype=np.intp)
    rows = np.arange(x.shape[0])

    def bw(g):
        out = np.zeros(x.shape, dtype=x.dtype)
        out[rows, index] = g
        return (out,)

    return _finish(x.data[rows, index], (x,), bw)


# -- linear algebra -----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (2-D or batched 3-D)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        if gb is not None and gb.ndim > bd.ndim:
            gb = gb.sum(axis=0)
        return ga, gb

    return _finish(np.matmul(ad, bd), (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias for x of shape [N, in] and weight [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear expects {weight.shape[1]} inputs, got {x.shape[-1]}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _finish(out, inputs, bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    s = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)

    def bw(g):
        out = g - np.einsum("...i,...i->...", g, s)[..., None]
        out *= s
        return (out,)

    return _finish(s, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    if np.isnan(x.data).any():
        raise NumericError("log_softmax received NaN input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _finish(out, (x,), bw)


# -- convolution --------------------------------------------------------------
def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    return as_strided(x, (n, c, kh, kw, ho, wo), (s0, s1, s2, s3, s2 * stride, s3 * stride), writeable=False)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid (unpadded) cross-correlation.

    `x` is [C_in, H, W] or batched [N, C_in, H, W]; `kernel` is
    [C_out, C_in, kh, kw]. Output spatial size is floor((H - kh) / stride) + 1.
    """
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride!r}")
    unbatched = x.ndim == 3
    if x.ndim not in (3, 4) or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects [C,H,W] or [N,C,H,W] input and 4-D kernel, got {x.shape}, {kernel.shape}")
    xd = x.data[None] if unbatched else x.data
    n, c, h, w = xd.shape
    co, ci, kh, kw = kernel.shape
    if ci != c:
        raise DimensionError(f"kernel expects {ci} input channels, input has {c}")
    if h < kh or w < kw:
        raise DimensionError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"bias shape {bias.shape} does not match {co} output channels")
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    p = ho * wo
    wd = kernel.data.reshape(co, -1)
    pointwise = kh == kw == 1 and stride == 1

    # per-sample column matrices [N, C*kh*kw, P]; W @ cols lands directly in NCHW
    cols = xd.reshape(n, c, p) if pointwise else _windows(xd, kh, kw, stride).reshape(n, c * kh * kw, p)
    out = np.matmul(wd, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, co, ho, wo)
    if unbatched:
        out = out[0]

    def bw(g):
        g = np.ascontiguousarray(g).reshape(n, co, p)
        gx = gk = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        if kernel.requires_grad:
            gk = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        if x.requires_grad:
            dcols = np.matmul(wd.T, g)
            if pointwise:
                gx = dcols.reshape(n, c, h, w)
            else:
                dcols = dcols.reshape(n, c, kh, kw, ho, wo)
                gx = np.zeros((n, c, h, w), dtype=xd.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
            if unbatched:
                gx = gx[0]
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _finish(out, inputs, bw)


def attention(query: Tensor, key: Tensor, value: Tensor, chunk: int = 8) -> tuple[Tensor, Tensor]:
    """Dot-product attention over positions for [N, D, P] operands.

    Returns ``(out, weights)`` with ``weights[n] = softmax(query[n].T @ key[n])``
    (row-normalised, [N, P, P]) and ``out[n] = value[n] @ weights[n].T``
    ([N, D, P]). Work is split into chunks along N so the [P, P] buffers stay
    cache-sized. Only `out` is differentiable; `weights` is a constant view
    for inspection.
    """
    for t in (key, value):
        if t.ndim != 3 or t.shape[0] != query.shape[0] or t.shape[2] != query.shape[2]:
            raise DimensionError(f"attention operands disagree: {query.shape}, {key.shape}, {value.shape}")
    if query.shape[1] != key.shape[1]:
        raise DimensionError(f"query/key depth mismatch: {query.shape[1]} vs {key.shape[1]}")
    q, k, v = query.data, key.data, value.data
    n, _, p = q.shape
    weights = np.empty((n, p, p), dtype=np.result_type(q, k))
    out = np.empty(v.shape, dtype=np.result_type(v, weights))
    for i in range(0, n, chunk):
        s = weights[i : i + chunk]
        np.matmul(q[i : i + chunk].transpose(0, 2, 1), k[i : i + chunk], out=s)
        with np.errstate(invalid="ignore", over="ignore"):
            s -= s.max(axis=-1, keepdims=True)
            np.exp(s, out=s)
        # an inf or nan logit anywhere in a row poisons that row's sum
        total = s.sum(axis=-1, keepdims=True)
        if not np.isfinite(total).all():
            raise NumericError("non-finite attention logits")
        s /= total
        out[i : i + chunk] = np.matmul(v[i : i + chunk], s.transpose(0, 2, 1))

    def bw(g):
        gq = np.empty_like(q) if query.requires_grad else None
        gk = np.empty_like(k) if key.requires_grad else None
        gv = np.empty_like(v) if value.requires_grad else None
        for i in range(0, n, chunk):
            sl = slice(i, i + chunk)
            s, gi = weights[sl], g[sl]
            if gv is not None:
                gv[sl] = np.matmul(gi, s)
            ds = np.matmul(gi.transpose(0, 2, 1), v[sl])
            ds -= np.einsum("bij,bij->bi", ds, s)[..., None]
            ds *= s
            if gq is not None:
                gq[sl] = np.matmul(k[sl], ds.transpose(0, 2, 1))
            if gk is not None:
                gk[sl] = np.matmul(q[sl], ds)
        return gq, gk, gv

    return _finish(out, (query, key, value), bw), Tensor(weights)


# -- resampling -------------------------------------------------------------
def _interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row i holds the align-corners linear weights for output sample i."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resize of the last two axes."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    rh = _interp_matrix(h, out_h, x.dtype)
    rw = _interp_matrix(w, out_w, x.dtype)
    out = rh @ x.data @ rw.T
    return _finish(out, (x,), lambda g: (rh.T @ g @ rw,))


# -- verification -----------------------------------------------------------
def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    eps: float = 1e-5,
    coords: int | Iterable[int] | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    The error per coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
    `coords` restricts the check to a random subset of that many flat
    coordinates (or an explicit list); by default every coordinate is checked.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64, order="C")
    xt = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    if y.size != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    if id(y) in tape._produced:
        (analytic,) = tape.gradient(y, [xt])
    else:
        analytic = np.zeros_like(base)
    analytic = analytic.reshape(-1)

    if coords is None:
        idx = np.arange(base.size)
    elif isinstance(coords, (int, np.integer)):
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(base.size, size=min(int(coords), base.size), replace=False)
    else:
        idx = np.asarray(list(coords), dtype=np.intp)

    flat = base.reshape(-1)
    worst = 0.0
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        up = f(Tensor(base)).item()
        flat[i] = old - eps
        down = f(Tensor(base)).item()
        flat[i] = old
        numeric = (up - down) / (2 * eps)
        a = analytic[i]
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst
