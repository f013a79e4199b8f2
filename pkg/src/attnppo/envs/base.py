"""Environment contract shared by the built-in toy games."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

FRAME_HEIGHT = 210
FRAME_WIDTH = 160


class EnvStateError(RuntimeError):
    """Stepping an environment that has not been reset or has finished."""


class EnvConfigError(ValueError):
    """The environment cannot support the requested wrapper or setting."""


@dataclass
class EnvStep:
    obs: np.ndarray
    reward: float
    done: bool
    info: dict[str, Any] = field(default_factory=dict)


class Env:
    """Base class for single-threaded environments rendering 210x160 RGB frames.

    Subclasses implement `_reset`, `_step` and `render`. `noop_action` is the
    index of the do-nothing action, or None when the game has none.
    """

    action_meanings: tuple[str, ...] = ()
    noop_action: int | None = 0

    def __init__(self):
        self._done = True
        self._started = False
        self.frame_count = 0
        self.rng = np.random.default_rng(0)

    @property
    def num_actions(self) -> int:
        return len(self.action_meanings)

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.frame_count = 0
        self._done = False
        self._started = True
        self._reset()
        return self.render()

    def step(self, action: int) -> EnvStep:
        if not self._started:
            raise EnvStateError("step() called before reset()")
        if self._done:
            raise EnvStateError("step() called after the episode ended; call reset()")
        if not isinstance(action, (int, np.integer)) or not 0 <= action < self.num_actions:
            raise ValueError(f"action must be an int in [0, {self.num_actions}), got {action!r}")
        self.frame_count += 1
        reward, done, info = self._step(int(action))
        self._done = done
        return EnvStep(self.render(), float(reward), bool(done), info)

    @property
    def done(self) -> bool:
        return self._done

    def _reset(self) -> None:
        raise NotImplementedError

    def _step(self, action: int) -> tuple[float, bool, dict]:
        raise NotImplementedError

    def render(self) -> np.ndarray:
        raise NotImplementedError


class GridRenderer:
    """Draws cell-aligned sprites on a black 210x160 canvas."""

    def __init__(self, rows: int, cols: int):
        self.rows, self.cols = rows, cols
        self.cell_h = FRAME_HEIGHT // rows
        self.cell_w = FRAME_WIDTH // cols
        self.top = (FRAME_HEIGHT - rows * self.cell_h) // 2
        self.left = (FRAME_WIDTH - cols * self.cell_w) // 2

    def blank(self) -> np.ndarray:
        return np.zeros((FRAME_HEIGHT, FRAME_WIDTH, 3), dtype=np.uint8)

    def cell_box(self, row: int, col: int, margin: int = 0) -> tuple[slice, slice]:
        y0 = self.top + row * self.cell_h
        x0 = self.left + col * self.cell_w
        return (
            slice(y0 + margin, y0 + self.cell_h - margin),
            slice(x0 + margin, x0 + self.cell_w - margin),
        )

    def fill(self, frame: np.ndarray, row: int, col: int, color, margin: int = 0) -> None:
        ys, xs = self.cell_box(row, col, margin)
        frame[ys, xs] = color
