"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"APPOCKPT"  u32 version  str variant  u32 num_actions  u64 timestep
    u32 n_tensors  { str name  u8 ndim  u32[ndim] shape  f32[...] data }
    u8 has_optimizer  [ u64 step  { f32 m }  { f32 v } ]   # same order as params
    str rng_state_json
    u32 crc32(everything above)

Strings are a u32 byte length followed by UTF-8. Every section is written
in a fixed order, so load followed by save reproduces the file byte for byte.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .networks import NetworkVariant, PolicyValueNet
from .tensor import Tensor

MAGIC = b"APPOCKPT"
VERSION = 1


class CheckpointError(ValueError):
    """The file is not a readable checkpoint or does not match what was expected."""


@dataclass
class Checkpoint:
    variant: NetworkVariant
    num_actions: int
    timestep: int
    params: dict[str, np.ndarray]
    adam_step: int | None = None
    adam_m: list[np.ndarray] | None = None
    adam_v: list[np.ndarray] | None = None
    rng_state: dict | None = None
    version: int = VERSION

    def to_network(self, dtype=np.float32) -> PolicyValueNet:
        params = {k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        return PolicyValueNet(self.variant, self.num_actions, params)

    def optimizer_state(self, dtype=np.float32):
        from .ppo import AdamState

        if self.adam_m is None:
            return None
        return AdamState([m.astype(dtype) for m in self.adam_m], [v.astype(dtype) for v in self.adam_v], self.adam_step)

    def rng(self) -> np.random.Generator | None:
        if self.rng_state is None:
            return None
        g = np.random.default_rng()
        g.bit_generator.state = self.rng_state
        return g


def _str(buf: io.BytesIO, s: str) -> None:
    b = s.encode()
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def _array(buf: io.BytesIO, arr: np.ndarray) -> None:
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def encode(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    _str(buf, ckpt.variant.value)
    buf.write(struct.pack("<IQ", ckpt.num_actions, ckpt.timestep))
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        _str(buf, name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        _array(buf, arr)
    if ckpt.adam_m is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        buf.write(struct.pack("<Q", ckpt.adam_step))
        for arr in ckpt.adam_m:
            _array(buf, arr)
        for arr in ckpt.adam_v:
            _array(buf, arr)
    _str(buf, "" if ckpt.rng_state is None else json.dumps(ckpt.rng_state, sort_keys=True))
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode()

    def floats(self, shape) -> np.ndarray:
        count = int(np.prod(shape)) if len(shape) else 1
        return np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)


def decode(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupted file)")
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        variant = NetworkVariant.parse(r.string())
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    num_actions, timestep = r.unpack("<IQ")
    (count,) = r.unpack("<I")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.string()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        params[name] = r.floats(shape)
    (has_opt,) = r.unpack("<B")
    adam_step = adam_m = adam_v = None
    if has_opt:
        (adam_step,) = r.unpack("<Q")
        adam_m = [r.floats(p.shape) for p in params.values()]
        adam_v = [r.floats(p.shape) for p in params.values()]
    rng_json = r.string()
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(
        variant,
        num_actions,
        timestep,
        params,
        adam_step,
        adam_m,
        adam_v,
        json.loads(rng_json) if rng_json else None,
        version,
    )


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode(ckpt))


def load_checkpoint(path, variant=None) -> Checkpoint:
    """Read a checkpoint; with `variant`, reject files written for another variant."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    ckpt = decode(data)
    if variant is not None and ckpt.variant != NetworkVariant.parse(variant):
        raise CheckpointError(f"checkpoint holds a {ckpt.variant.value} network, expected {NetworkVariant.parse(variant).value}")
    return ckpt


def make_checkpoint(net: PolicyValueNet, optimizer=None, timestep: int = 0, rng: np.random.Generator | None = None) -> Checkpoint:
    return Checkpoint(
        net.variant,
        net.num_actions,
        int(timestep),
        {k: p.data.astype(np.float32) for k, p in net.params.items()},
        None if optimizer is None else int(optimizer.t),
        None if optimizer is None else [m.astype(np.float32) for m in optimizer.m],
        None if optimizer is None else [v.astype(np.float32) for v in optimizer.v],
        None if rng is None else rng.bit_generator.state,
    )


def save_checkpoint(path, net: PolicyValueNet, optimizer=None, timestep: int = 0, rng=None) -> None:
    write_checkpoint(path, make_checkpoint(net, optimizer, timestep, rng))


def load_network(path, variant=None, dtype=np.float32) -> PolicyValueNet:
    return load_checkpoint(path, variant).to_network(dtype)
