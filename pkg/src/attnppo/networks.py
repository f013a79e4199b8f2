"""Convolutional actor-critic with optional non-local self-attention blocks.

The trunk is the classic Atari network (three valid convolutions and a
512-unit dense layer). Attention variants insert embedded-Gaussian non-local
blocks after H1 (single variants) or after both H1 and H2 (double variants),
combining the block output ``Y`` with its input ``X`` as ``X + Y``,
``X + 2Y`` or ``Y``.
"""

from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

OBS_SHAPE = (4, 84, 84)

# (name, out_channels, kernel, stride)
CONV_LAYERS = (("h1", 32, 8, 4), ("h2", 64, 4, 2), ("h3", 64, 3, 1))
DENSE_UNITS = 512
FLAT_FEATURES = 64 * 7 * 7


class NetworkVariant(str, enum.Enum):
    BASELINE = "BASELINE"
    SAN = "SAN"
    SSAN = "SSAN"
    SADN = "SADN"
    SSADN = "SSADN"
    PSAN = "PSAN"
    PSADN = "PSADN"

    @classmethod
    def parse(cls, value) -> "NetworkVariant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown network variant {value!r}; expected one of {[v.value for v in cls]}") from None

    @property
    def num_blocks(self) -> int:
        return _LAYOUT[self][0]

    @property
    def mode(self) -> str | None:
        return _LAYOUT[self][1]


_LAYOUT = {
    NetworkVariant.BASELINE: (0, None),
    NetworkVariant.SAN: (1, "residual"),
    NetworkVariant.SSAN: (1, "strong"),
    NetworkVariant.PSAN: (1, "pure"),
    NetworkVariant.SADN: (2, "residual"),
    NetworkVariant.SSADN: (2, "strong"),
    NetworkVariant.PSADN: (2, "pure"),
}

MODES = ("residual", "strong", "pure")

# channels entering block i (block 0 follows H1, block 1 follows H2)
BLOCK_CHANNELS = (32, 64)


@dataclass
class NonLocalBlockParams:
    """1x1 projections of one embedded-Gaussian non-local block."""

    w_theta: Tensor
    b_theta: Tensor
    w_phi: Tensor
    b_phi: Tensor
    w_g: Tensor
    b_g: Tensor
    w_out: Tensor
    b_out: Tensor

    ROLES = ("w_theta", "b_theta", "w_phi", "b_phi", "w_g", "b_g", "w_out", "b_out")

    @property
    def channels(self) -> int:
        return self.w_theta.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {role: getattr(self, role) for role in self.ROLES}


def block_param_count(channels: int) -> int:
    """Closed-form parameter count of a block on `channels` input channels."""
    inner = channels // 2
    return 3 * (channels * inner + inner) + inner * channels + channels


def baseline_param_count(num_actions: int) -> int:
    total, c_in = 0, OBS_SHAPE[0]
    for _, c_out, k, _ in CONV_LAYERS:
        total += c_out * c_in * k * k + c_out
        c_in = c_out
    total += FLAT_FEATURES * DENSE_UNITS + DENSE_UNITS
    total += DENSE_UNITS * num_actions + num_actions
    total += DENSE_UNITS + 1
    return total


def orthogonal(rng: np.random.Generator, shape: tuple[int, ...], gain: float) -> np.ndarray:
    rows = shape[0]
    cols = int(np.prod(shape[1:]))
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray((gain * q[:rows, :cols]).reshape(shape))


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # one stream per parameter name so adding blocks never shifts trunk weights
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


class ForwardResult(NamedTuple):
    logits: Tensor
    value: Tensor
    activations: Tensor
    attn_maps: list[Tensor]


@dataclass
class PolicyValueNet:
    """Parameters of one network variant, keyed ``<layer>/<role>``."""

    variant: NetworkVariant
    num_actions: int
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def num_blocks(self) -> int:
        return self.variant.num_blocks

    @property
    def dtype(self):
        return self.params["h1/kernel"].dtype

    def block(self, i: int) -> NonLocalBlockParams:
        if not 0 <= i < self.num_blocks:
            raise IndexError(f"{self.variant.value} has {self.num_blocks} attention blocks, no block {i}")
        return NonLocalBlockParams(**{role: self.params[f"block{i}/{role}"] for role in NonLocalBlockParams.ROLES})

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "PolicyValueNet":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        return PolicyValueNet(self.variant, self.num_actions, params)

    def copy(self) -> "PolicyValueNet":
        return self.astype(self.dtype)

    def head(self, activations: Tensor) -> tuple[Tensor, Tensor]:
        """Dense layer and both heads on a batch of H3 activations."""
        p = self.params
        flat = activations.reshape(activations.shape[0], FLAT_FEATURES)
        hidden = T.relu(T.linear(flat, p["fc/kernel"], p["fc/bias"]))
        logits = T.linear(hidden, p["pi/kernel"], p["pi/bias"])
        value = T.linear(hidden, p["v/kernel"], p["v/bias"]).reshape(activations.shape[0])
        return logits, value

    def __call__(self, obs) -> ForwardResult:
        return net_forward(self, obs)


def build_network(variant, num_actions: int, seed: int, dtype=np.float32) -> PolicyValueNet:
    """Deterministically initialise a network.

    Conv and dense kernels are orthogonal with gain sqrt(2); the policy head
    uses gain 0.01 and the value head gain 1. Block projections are
    orthogonal with gain 1 except ``w_out``, which starts at zero so
    residual blocks are identities at initialisation.
    """
    variant = NetworkVariant.parse(variant)
    if num_actions < 2:
        raise ValueError(f"num_actions must be >= 2, got {num_actions}")
    params: dict[str, Tensor] = {}

    def put(name: str, arr: np.ndarray) -> None:
        params[name] = Tensor(np.asarray(arr, dtype=dtype), requires_grad=True, name=name)

    def kernel(name: str, shape, gain: float) -> None:
        put(name, orthogonal(_param_rng(seed, name), shape, gain))

    c_in = OBS_SHAPE[0]
    for li, (name, c_out, k, _) in enumerate(CONV_LAYERS):
        kernel(f"{name}/kernel", (c_out, c_in, k, k), np.sqrt(2))
        put(f"{name}/bias", np.zeros(c_out))
        c_in = c_out
    kernel("fc/kernel", (DENSE_UNITS, FLAT_FEATURES), np.sqrt(2))
    put("fc/bias", np.zeros(DENSE_UNITS))
    kernel("pi/kernel", (num_actions, DENSE_UNITS), 0.01)
    put("pi/bias", np.zeros(num_actions))
    kernel("v/kernel", (1, DENSE_UNITS), 1.0)
    put("v/bias", np.zeros(1))

    for i in range(variant.num_blocks):
        c = BLOCK_CHANNELS[i]
        inner = c // 2
        for role in ("theta", "phi", "g"):
            kernel(f"block{i}/w_{role}", (inner, c, 1, 1), 1.0)
            put(f"block{i}/b_{role}", np.zeros(inner))
        put(f"block{i}/w_out", np.zeros((c, inner, 1, 1)))
        put(f"block{i}/b_out", np.zeros(c))
    return PolicyValueNet(variant, num_actions, params)


def nonlocal_forward(x: Tensor, params: NonLocalBlockParams, mode: str = "residual") -> tuple[Tensor, Tensor]:
    """Embedded-Gaussian non-local block on [C,H,W] or [N,C,H,W].

    Returns the combined output and the [P,P] (or [N,P,P]) row-softmax
    attention matrix, where row i holds the weights position i places on
    every position.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    unbatched = x.ndim == 3
    if unbatched:
        x = x.reshape((1,) + x.shape)
    n, c, h, w = x.shape
    if c < 2:
        raise ValueError(f"non-local block needs at least 2 channels, got {c}")
    if params.channels != c:
        raise DimensionError(f"block expects {params.channels} channels, input has {c}")
    inner = params.w_theta.shape[0]
    p = h * w

    theta = T.conv2d(x, params.w_theta, params.b_theta).reshape(n, inner, p)
    phi = T.conv2d(x, params.w_phi, params.b_phi).reshape(n, inner, p)
    g = T.conv2d(x, params.w_g, params.b_g).reshape(n, inner, p)

    y, attn = T.attention(theta, phi, g)  # y: [N, inner, P], attn: [N, P, P]
    y = T.conv2d(y.reshape(n, inner, h, w), params.w_out, params.b_out)

    if mode == "residual":
        out = x + y
    elif mode == "strong":
        out = x + y * 2.0
    else:
        out = y
    if unbatched:
        out = out.reshape(c, h, w)
        attn = attn.reshape(p, p)
    return out, attn


def net_forward(net: PolicyValueNet, obs) -> ForwardResult:
    """Run the network on one observation [4,84,84] or a batch [N,4,84,84].

    Unbatched input yields logits [A], a scalar value, activations [64,7,7]
    and attention matrices [P,P]; batched input keeps the leading axis.
    """
    x = obs if isinstance(obs, Tensor) else Tensor(np.asarray(obs, dtype=net.dtype))
    unbatched = x.ndim == 3
    if unbatched:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or x.shape[1:] != OBS_SHAPE:
        raise DimensionError(f"observation must have shape {OBS_SHAPE}, got {tuple(obs.shape)}")

    p = net.params
    mode = net.variant.mode
    attn_maps: list[Tensor] = []
    h = x
    for li, (name, _, _, stride) in enumerate(CONV_LAYERS):
        h = T.relu(T.conv2d(h, p[f"{name}/kernel"], p[f"{name}/bias"], stride=stride))
        if li < net.num_blocks:
            h, attn = nonlocal_forward(h, net.block(li), mode)
            attn_maps.append(attn)
    activations = h
    logits, value = net.head(activations)

    if unbatched:
        logits = logits.reshape(net.num_actions)
        value = value.reshape(())
        activations = activations.reshape(activations.shape[1:])
        attn_maps = [a.reshape(a.shape[1:]) for a in attn_maps]
    return ForwardResult(logits, value, activations, attn_maps)


def extract_attention(net: PolicyValueNet, obs, block_index: int) -> np.ndarray:
    """Attention matrix of one block for one observation."""
    if not 0 <= block_index < net.num_blocks:
        raise ValueError(f"{net.variant.value} has {net.num_blocks} attention blocks; index {block_index} is out of range")
    return net_forward(net, obs).attn_maps[block_index].data
