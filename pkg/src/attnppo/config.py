"""Run configuration stored as a flat ``key = value`` text file.

Recognised keys are ``variant``, ``env``, ``env.<param>``, ``seeds`` (comma
separated), ``out``, ``checkpoint_every``, ``eval_every``, ``eval_episodes``,
``eval_greedy``, ``target_return`` and every PPOConfig field
(``timesteps`` is accepted for ``total_timesteps``). Lines starting with
``#`` are comments.
"""

from __future__ import annotations

import ast
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .networks import NetworkVariant
from .ppo import PPOConfig


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


_ALIASES = {"timesteps": "total_timesteps", "lr": "learning_rate"}


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    variant: str = "SAN"
    env: str = "blinkingchase"
    env_params: dict = field(default_factory=dict)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    seeds: tuple[int, ...] = (0, 1, 2)
    out: str = "runs/default"
    checkpoint_every: int = 0
    eval_every: int = 0
    eval_episodes: int = 10
    eval_greedy: bool = False
    target_return: float | None = None

    def __post_init__(self):
        try:
            self.variant = NetworkVariant.parse(self.variant).value
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"duplicate seeds in {self.seeds}")

    def set(self, key: str, value) -> None:
        """Apply one ``key = value`` override (value may still be text)."""
        key = key.strip()
        if isinstance(value, str):
            value = parse_value(value)
        key = _ALIASES.get(key, key)
        if key.startswith("env."):
            self.env_params[key[4:]] = value
        elif key == "seeds":
            if isinstance(value, int):
                value = (value,)
            elif isinstance(value, str):
                value = tuple(int(s) for s in value.split(",") if s.strip())
            self.seeds = tuple(int(s) for s in value)
            self.__post_init__()
        elif key in PPOConfig.field_names():
            params = asdict(self.ppo)
            params[key] = value
            try:
                self.ppo = PPOConfig(**params)
            except (TypeError, ValueError) as exc:
                raise ConfigError(str(exc)) from None
        elif key in {f.name for f in fields(self)} and key not in ("ppo", "env_params"):
            setattr(self, key, value)
            self.__post_init__()
        else:
            raise ConfigError(f"unknown configuration key {key!r}")

    def to_lines(self) -> list[str]:
        lines = [
            f"variant = {self.variant}",
            f"env = {self.env}",
            f"seeds = {format_value(self.seeds)}",
            f"out = {self.out}",
            f"checkpoint_every = {self.checkpoint_every}",
            f"eval_every = {self.eval_every}",
            f"eval_episodes = {self.eval_episodes}",
            f"eval_greedy = {format_value(self.eval_greedy)}",
            f"target_return = {format_value(self.target_return)}",
        ]
        lines += [f"env.{k} = {format_value(v)}" for k, v in sorted(self.env_params.items())]
        lines += [f"{k} = {format_value(v)}" for k, v in asdict(self.ppo).items()]
        return lines

    def dump(self, path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n")

    @classmethod
    def from_lines(cls, lines) -> "RunConfig":
        cfg = cls()
        for n, raw in enumerate(lines, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key = value, got {raw!r}")
            key, value = line.split("=", 1)
            cfg.set(key, value)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_lines(text.splitlines())
