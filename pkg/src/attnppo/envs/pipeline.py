"""Atari-style observation pipeline: grayscale/resize, max-and-skip, frame stack, no-op starts."""

from __future__ import annotations

from collections import deque

import numpy as np

from ..tensor import _interp_matrix
from .base import Env, EnvConfigError, EnvStateError

FRAME_SIZE = 84
STACK_DEPTH = 4
LUMA = np.array([0.299, 0.587, 0.114])
_LUMA32 = (LUMA / 255.0).astype(np.float32)

_resize_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def to_grayscale_resize(frame: np.ndarray, size: int = FRAME_SIZE) -> np.ndarray:
    """Luma-weighted grayscale, align-corners bilinear resize, scale to [0, 1]."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 frame, got shape {frame.shape}")
    h, w = frame.shape[:2]
    key = (h, w, size)
    if key not in _resize_cache:
        _resize_cache[key] = (_interp_matrix(h, size, np.float32), np.ascontiguousarray(_interp_matrix(w, size, np.float32).T))
    rh, rwt = _resize_cache[key]
    # float32 throughout: observations are float32 and this runs every step
    out = rh @ (frame.astype(np.float32) @ _LUMA32) @ rwt
    return np.clip(out, 0.0, 1.0, out=out)


def max_and_skip(env: Env, action: int, skip: int = 4) -> tuple[np.ndarray, float, bool, dict]:
    """Repeat `action` up to `skip` raw steps.

    Returns the pixelwise maximum of the last two raw frames, the summed
    reward, the done flag and the last step's info.
    """
    if skip < 2:
        raise ValueError(f"skip must be >= 2, got {skip}")
    total = 0.0
    frames: deque[np.ndarray] = deque(maxlen=2)
    info: dict = {}
    done = False
    for _ in range(skip):
        step = env.step(action)
        frames.append(step.obs)
        total += step.reward
        info = step.info
        if step.done:
            done = True
            break
    frame = frames[0] if len(frames) == 1 else np.maximum(frames[0], frames[1])
    return frame, total, done, info


class FrameStack:
    """FIFO of the four most recent processed frames, oldest first."""

    def __init__(self, depth: int = STACK_DEPTH):
        self.depth = depth
        self._frames: deque[np.ndarray] | None = None

    def reset(self, frame: np.ndarray) -> np.ndarray:
        self._frames = deque([frame] * self.depth, maxlen=self.depth)
        return self.observation()

    def push(self, frame: np.ndarray) -> np.ndarray:
        if self._frames is None:
            raise EnvStateError("frame stack used before reset")
        self._frames.append(frame)
        return self.observation()

    def observation(self) -> np.ndarray:
        if self._frames is None:
            raise EnvStateError("frame stack used before reset")
        return np.stack(self._frames)


def frame_stack(stack: FrameStack, new_frame: np.ndarray) -> np.ndarray:
    return stack.push(new_frame)


def noop_start(env: Env, rng: np.random.Generator, noop_max: int = 30) -> tuple[np.ndarray, int]:
    """Run k ~ U{1..noop_max} raw no-op steps on a freshly reset env.

    Returns the last raw frame and k. If the episode ends during the no-ops
    the env is reset and the remaining no-ops continue.
    """
    if env.noop_action is None:
        raise EnvConfigError(f"{type(env).__name__} has no no-op action")
    k = int(rng.integers(1, noop_max + 1))
    frame = env.render()
    for _ in range(k):
        step = env.step(env.noop_action)
        frame = step.obs
        if step.done:
            frame = env.reset()
    return frame, k


class AtariPipeline:
    """Wraps an env so that each agent step sees a [4, 84, 84] stack in [0, 1].

    reset: env reset, random no-op start, stack seeded with four copies of the
    first processed frame. step: max-and-skip, process, push.
    """

    def __init__(self, env: Env, skip: int = 4, noop_max: int = 30, frame_dump=None):
        self.env = env
        self.skip = skip
        self.noop_max = noop_max
        self.stack = FrameStack()
        self.rng = np.random.default_rng(0)
        self.frame_dump = frame_dump
        self.last_raw: np.ndarray | None = None
        self.episode_return = 0.0
        self.episode_length = 0
        self.noops = 0

    @property
    def num_actions(self) -> int:
        return self.env.num_actions

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        env_seed = int(self.rng.integers(2**31))
        self.env.reset(env_seed)
        raw = self.env.render()
        if self.noop_max > 0:
            raw, self.noops = noop_start(self.env, self.rng, self.noop_max)
        self.last_raw = raw
        self.episode_return = 0.0
        self.episode_length = 0
        obs = self.stack.reset(to_grayscale_resize(raw))
        if self.frame_dump is not None:
            self.frame_dump(raw, obs[-1])
        return obs

    def step(self, action: int) -> tuple[np.ndarray, float, bool, dict]:
        raw, reward, done, info = max_and_skip(self.env, action, self.skip)
        self.last_raw = raw
        self.episode_return += reward
        self.episode_length += 1
        processed = to_grayscale_resize(raw)
        obs = self.stack.push(processed)
        if self.frame_dump is not None:
            self.frame_dump(raw, processed)
        if done:
            info = dict(info, episode_return=self.episode_return, episode_length=self.episode_length)
        return obs, reward, done, info
