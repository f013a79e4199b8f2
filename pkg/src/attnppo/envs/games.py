"""Built-in toy games: Corridor, DodgeLanes and BlinkingChase."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import Env, EnvConfigError, GridRenderer

AGENT_COLOR = (255, 220, 0)
GOAL_COLOR = (0, 200, 0)
PELLET_COLOR = (255, 255, 255)
ENEMY_COLORS = ((255, 80, 80), (80, 220, 255), (255, 120, 255), (255, 160, 60))

# row, col deltas for NOOP, UP, DOWN, LEFT, RIGHT
_MOVES = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))


class Corridor(Env):
    """N-cell chain; the agent starts in cell 0 and earns 1 on reaching cell N-1.

    Each raw step moves the agent by one cell. Episodes also end after
    `max_steps` raw steps.
    """

    action_meanings = ("NOOP", "LEFT", "RIGHT")

    def __init__(self, n: int = 5, max_steps: int = 50):
        super().__init__()
        if n < 2:
            raise EnvConfigError(f"corridor needs at least 2 cells, got {n}")
        self.n = n
        self.max_steps = max_steps
        self.renderer = GridRenderer(3, n)
        self.position = 0

    def _reset(self) -> None:
        self.position = 0

    def _step(self, action: int):
        if action == 1:
            self.position = max(0, self.position - 1)
        elif action == 2:
            self.position = min(self.n - 1, self.position + 1)
        if self.position == self.n - 1:
            return 1.0, True, {"position": self.position}
        return 0.0, self.frame_count >= self.max_steps, {"position": self.position}

    def render(self) -> np.ndarray:
        frame = self.renderer.blank()
        for c in range(self.n):
            self.renderer.fill(frame, 1, c, (40, 40, 40), margin=1)
        self.renderer.fill(frame, 1, self.n - 1, GOAL_COLOR, margin=2)
        self.renderer.fill(frame, 1, self.position, AGENT_COLOR, margin=4)
        return frame


class DodgeLanes(Env):
    """Enemies fall down parallel lanes; the agent at the bottom dodges them.

    Several enemies are on screen at once. An enemy leaving the bottom edge
    pays +1; a collision pays -1 and ends the episode.
    """

    action_meanings = ("NOOP", "LEFT", "RIGHT")

    def __init__(
        self,
        lanes: int = 5,
        rows: int = 8,
        spawn_prob: float = 0.35,
        frames_per_move: int = 4,
        enemy_frames_per_move: int = 4,
        max_steps: int = 800,
    ):
        super().__init__()
        self.lanes, self.rows = lanes, rows
        self.spawn_prob = spawn_prob
        self.frames_per_move = frames_per_move
        self.enemy_frames_per_move = enemy_frames_per_move
        self.max_steps = max_steps
        self.renderer = GridRenderer(rows, lanes)
        self.agent = lanes // 2
        self.enemies: list[list[int]] = []

    def _reset(self) -> None:
        self.agent = self.lanes // 2
        self.enemies = []

    def _step(self, action: int):
        t = self.frame_count
        reward = 0.0
        if t % self.frames_per_move == 0:
            if action == 1:
                self.agent = max(0, self.agent - 1)
            elif action == 2:
                self.agent = min(self.lanes - 1, self.agent + 1)
        if self._hit():
            return -1.0, True, {}
        if t % self.enemy_frames_per_move == 0:
            kept = []
            for row, lane in self.enemies:
                row += 1
                if row >= self.rows:
                    reward += 1.0
                else:
                    kept.append([row, lane])
            self.enemies = kept
            if self.rng.random() < self.spawn_prob:
                self.enemies.append([0, int(self.rng.integers(self.lanes))])
            if self._hit():
                return reward - 1.0, True, {}
        return reward, t >= self.max_steps, {"enemies": len(self.enemies)}

    def _hit(self) -> bool:
        return any(row == self.rows - 1 and lane == self.agent for row, lane in self.enemies)

    def render(self) -> np.ndarray:
        frame = self.renderer.blank()
        for i, (row, lane) in enumerate(self.enemies):
            self.renderer.fill(frame, row, lane, ENEMY_COLORS[i % len(ENEMY_COLORS)], margin=3)
        self.renderer.fill(frame, self.rows - 1, self.agent, AGENT_COLOR, margin=2)
        return frame


@dataclass
class BlinkingChaseConfig:
    """Parameters of BlinkingChase.

    Enemy i is drawn on raw frame t unless ``(t + phase_i) % blink_period``
    is below ``hidden_streak_max``, so each enemy disappears for
    ``hidden_streak_max`` consecutive raw frames per period, each on its own
    phase. ``frames_per_move`` is the agent speed in raw frames per cell.
    """

    grid_size: int = 8
    enemy_count: int = 2
    blink_period: int = 2
    hidden_streak_max: int = 1
    frames_per_move: int = 4
    enemy_frames_per_move: int = 8
    chase_prob: float = 0.5
    max_steps: int = 400
    pellet_count: int = 3
    phases: tuple[int, ...] | None = None
    enemy_start: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        if self.grid_size < 3:
            raise EnvConfigError("grid_size must be at least 3")
        if self.blink_period < 1 or not 0 <= self.hidden_streak_max < self.blink_period:
            raise EnvConfigError("need blink_period >= 1 and 0 <= hidden_streak_max < blink_period")
        if self.phases is not None and len(self.phases) != self.enemy_count:
            raise EnvConfigError("phases must list one offset per enemy")


class BlinkingChase(Env):
    """Pellet collection on a grid while blinking enemies give chase.

    `pellet_count` pellets are on the board at a time. Each pays +1 when
    collected, after which a new one appears. Contact with an enemy ends the
    episode. Enemies blink on per-enemy phases; with a long hidden streak an
    enemy can be missing from every frame the agent sees.
    """

    action_meanings = ("NOOP", "UP", "DOWN", "LEFT", "RIGHT")

    def __init__(self, config: BlinkingChaseConfig | None = None, **overrides):
        super().__init__()
        if config is None:
            config = BlinkingChaseConfig(**overrides)
        elif overrides:
            raise TypeError("pass either a config or keyword overrides, not both")
        self.config = config
        g = config.grid_size
        self.renderer = GridRenderer(g, g)
        self.agent = (g - 1, g // 2)
        self.enemies: list[tuple[int, int]] = []
        self.phases: list[int] = []
        self.pellets: list[tuple[int, int]] = []

    def _reset(self) -> None:
        cfg = self.config
        g = cfg.grid_size
        self.agent = (g - 1, g // 2)
        if cfg.enemy_start is not None:
            self.enemies = [tuple(e) for e in cfg.enemy_start]
        else:
            corners = [(0, 0), (0, g - 1), (g // 2, 0), (g // 2, g - 1)]
            self.enemies = [corners[i % len(corners)] for i in range(cfg.enemy_count)]
        if cfg.phases is not None:
            self.phases = [int(p) for p in cfg.phases]
        else:
            self.phases = [int(p) for p in self.rng.integers(cfg.blink_period, size=cfg.enemy_count)]
        self.pellets = []
        for _ in range(cfg.pellet_count):
            self._spawn_pellet()

    def _spawn_pellet(self) -> None:
        g = self.config.grid_size
        taken = set(self.pellets) | {self.agent} | set(self.enemies)
        free = [(r, c) for r in range(g) for c in range(g) if (r, c) not in taken]
        self.pellets.append(free[int(self.rng.integers(len(free)))])

    def visible(self, i: int, frame: int | None = None) -> bool:
        t = self.frame_count if frame is None else frame
        cfg = self.config
        return (t + self.phases[i]) % cfg.blink_period >= cfg.hidden_streak_max

    def _move(self, pos, delta):
        g = self.config.grid_size
        return (min(g - 1, max(0, pos[0] + delta[0])), min(g - 1, max(0, pos[1] + delta[1])))

    def _step(self, action: int):
        cfg = self.config
        t = self.frame_count
        reward = 0.0
        info = {}
        if t % cfg.frames_per_move == 0:
            self.agent = self._move(self.agent, _MOVES[action])
            if self.agent in self.pellets:
                self.pellets.remove(self.agent)
                reward += 1.0
                self._spawn_pellet()
        if self.agent in self.enemies:
            return reward, True, {"caught": True}
        if t % cfg.enemy_frames_per_move == 0:
            self.enemies = [self._enemy_move(e) for e in self.enemies]
            if self.agent in self.enemies:
                return reward, True, {"caught": True}
        return reward, t >= cfg.max_steps, info

    def _enemy_move(self, pos):
        if self.rng.random() < self.config.chase_prob:
            dr = self.agent[0] - pos[0]
            dc = self.agent[1] - pos[1]
            if abs(dr) >= abs(dc) and dr != 0:
                delta = (int(np.sign(dr)), 0)
            elif dc != 0:
                delta = (0, int(np.sign(dc)))
            else:
                delta = (0, 0)
        else:
            delta = _MOVES[1 + int(self.rng.integers(4))]
        return self._move(pos, delta)

    def render(self) -> np.ndarray:
        frame = self.renderer.blank()
        for p in self.pellets:
            self.renderer.fill(frame, *p, PELLET_COLOR, margin=7)
        self.renderer.fill(frame, *self.agent, AGENT_COLOR, margin=2)
        for i, e in enumerate(self.enemies):
            if self.visible(i):
                self.renderer.fill(frame, *e, ENEMY_COLORS[i % len(ENEMY_COLORS)], margin=2)
        return frame


ENVIRONMENTS = {
    "corridor": Corridor,
    "dodgelanes": DodgeLanes,
    "blinkingchase": BlinkingChase,
}


def make_env(name: str, **params) -> Env:
    """Instantiate a built-in environment by (case-insensitive) name."""
    key = name.lower().replace("_", "").replace("-", "")
    if key not in ENVIRONMENTS:
        raise EnvConfigError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}")
    cls = ENVIRONMENTS[key]
    if cls is BlinkingChase:
        return cls(BlinkingChaseConfig(**params))
    return cls(**params)
