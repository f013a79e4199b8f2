"""Proximal policy optimisation with a clipped surrogate and GAE."""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import tensor as T
from .envs import AtariPipeline, Env, make_env
from .networks import PolicyValueNet, build_network
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("timestep", "mean_return", "max_avg_return", "policy_loss", "value_loss", "entropy")


@dataclass
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.1
    epochs: int = 4
    minibatches: int = 4
    learning_rate: float = 2.5e-4
    lr_decay: bool = True
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5
    horizon: int = 128
    workers: int = 8
    total_timesteps: int = 200_000
    noop_max: int = 30
    skip: int = 4
    return_window: int = 100

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError(f"clip_eps must lie in (0, 1), got {self.clip_eps}")
        for name in ("gamma", "gae_lambda"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        for name in ("epochs", "minibatches", "horizon", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if (self.horizon * self.workers) % self.minibatches:
            raise ValueError("horizon * workers must be divisible by minibatches")

    @property
    def batch_size(self) -> int:
        return self.horizon * self.workers

    @property
    def num_updates(self) -> int:
        return max(1, self.total_timesteps // self.batch_size)

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


# -- environments -------------------------------------------------------------
EnvFactory = Callable[[], Env]


def env_factory(env, **params) -> EnvFactory:
    """Normalise an env name, factory or instance into a zero-arg factory."""
    if callable(env) and not isinstance(env, Env):
        return env
    if isinstance(env, Env):
        raise TypeError("pass an environment name or factory; workers need separate instances")
    return lambda: make_env(env, **params)


class EnvPool:
    """Independent pipelines stepped in lockstep, auto-resetting finished episodes."""

    def __init__(self, factory: EnvFactory, workers: int, seed: int, noop_max: int = 30, skip: int = 4):
        self.pipes = [AtariPipeline(factory(), skip=skip, noop_max=noop_max) for _ in range(workers)]
        seeds = np.random.SeedSequence(seed).spawn(workers)
        self.obs = np.stack([p.reset(int(s.generate_state(1)[0])) for p, s in zip(self.pipes, seeds)])
        self.completed: list[float] = []

    @property
    def num_actions(self) -> int:
        return self.pipes[0].num_actions

    def __len__(self) -> int:
        return len(self.pipes)

    def step(self, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rewards = np.zeros(len(self.pipes))
        dones = np.zeros(len(self.pipes), dtype=bool)
        for i, (pipe, a) in enumerate(zip(self.pipes, actions)):
            obs, r, done, info = pipe.step(int(a))
            rewards[i], dones[i] = r, done
            if done:
                self.completed.append(info["episode_return"])
                obs = pipe.reset()
            self.obs[i] = obs
        return self.obs, rewards, dones


# -- acting -------------------------------------------------------------------
def sample_actions(logits: np.ndarray, rng: np.random.Generator, greedy: bool = False):
    """Sample from categorical policies given [N, A] logits; returns actions and log-probs."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    if greedy:
        actions = logits.argmax(axis=-1)
    else:
        cdf = np.cumsum(np.exp(logp), axis=-1)
        u = rng.random(len(logits))[:, None] * cdf[:, -1:]
        actions = np.minimum((u > cdf).sum(axis=-1), logits.shape[-1] - 1)
    return actions, logp[np.arange(len(actions)), actions]


@dataclass
class RolloutBuffer:
    """T steps from W workers plus the bootstrap value of the final states."""

    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    last_values: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    def finalize(self, gamma: float, lam: float) -> None:
        if self.advantages is not None:
            raise RuntimeError("advantages were already computed for this rollout")
        self.advantages, self.returns = compute_gae(self.rewards, self.values, self.dones, self.last_values, gamma, lam)

    def flat(self) -> dict[str, np.ndarray]:
        if self.advantages is None:
            raise RuntimeError("call finalize() before reading training batches")
        n = self.actions.size
        return {
            "obs": self.obs.reshape((n,) + self.obs.shape[2:]),
            "actions": self.actions.reshape(n),
            "log_probs": self.log_probs.reshape(n),
            "values": self.values.reshape(n),
            "advantages": self.advantages.reshape(n),
            "returns": self.returns.reshape(n),
        }


def collect_rollout(net, pool: EnvPool, horizon: int, rng: np.random.Generator) -> RolloutBuffer:
    """Roll the current policy for `horizon` steps in every worker."""
    w = len(pool)
    obs = np.empty((horizon, w) + pool.obs.shape[1:], dtype=np.float32)
    actions = np.empty((horizon, w), dtype=np.int64)
    log_probs = np.empty((horizon, w))
    values = np.empty((horizon, w))
    rewards = np.empty((horizon, w))
    dones = np.empty((horizon, w), dtype=bool)
    for t in range(horizon):
        obs[t] = pool.obs
        out = net(pool.obs)
        a, lp = sample_actions(out.logits.data, rng)
        actions[t], log_probs[t], values[t] = a, lp, out.value.data
        _, rewards[t], dones[t] = pool.step(a)
    last_values = np.asarray(net(pool.obs).value.data, dtype=np.float64)
    return RolloutBuffer(obs, actions, log_probs, values, rewards, dones, last_values)


# -- advantage estimation -------------------------------------------------------
def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float):
    """Generalised advantage estimates over a [T, ...] trajectory.

    delta_t = r_t + gamma * v_{t+1} * (1 - done_t) - v_t and
    A_t = delta_t + gamma * lam * (1 - done_t) * A_{t+1}; returns = A + v.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    notdone = 1.0 - np.asarray(dones, dtype=np.float64)
    adv = np.zeros_like(rewards)
    next_value = np.asarray(last_values, dtype=np.float64)
    running = np.zeros_like(next_value)
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * next_value * notdone[t] - values[t]
        running = delta + gamma * lam * notdone[t] * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + eps)


# -- loss -----------------------------------------------------------------------
def clipped_surrogate(new_logp: Tensor, old_logp, advantages, clip_eps: float) -> Tensor:
    """-mean(min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)), rho = exp(new - old)."""
    ratio = T.exp(new_logp - T.Tensor(np.asarray(old_logp, dtype=new_logp.dtype)))
    adv = T.Tensor(np.asarray(advantages, dtype=new_logp.dtype))
    unclipped = ratio * adv
    clipped = T.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    return -T.mean(T.minimum(unclipped, clipped))


class LossTerms(NamedTuple):
    total: Tensor
    policy: float
    value: float
    entropy: float
    approx_kl: float
    clip_frac: float


def ppo_loss(net, batch: dict, clip_eps: float, value_coef: float = 0.5, entropy_coef: float = 0.01) -> LossTerms:
    """Clipped PPO objective with clipped value loss and entropy bonus.

    `batch` carries obs, actions, old log_probs, old values, (already
    normalised) advantages and returns. `net(obs)` must return an object with
    `logits` [N, A] and `value` [N].
    """
    out = net(batch["obs"])
    dtype = out.logits.dtype
    logp_all = T.log_softmax(out.logits)
    new_logp = T.take_along_last(logp_all, batch["actions"])
    policy = clipped_surrogate(new_logp, batch["log_probs"], batch["advantages"], clip_eps)

    old_v = T.Tensor(np.asarray(batch["values"], dtype=dtype))
    ret = T.Tensor(np.asarray(batch["returns"], dtype=dtype))
    v = out.value
    v_clipped = old_v + T.clip(v - old_v, -clip_eps, clip_eps)
    value = T.mean(T.maximum(T.square(v - ret), T.square(v_clipped - ret))) * 0.5

    entropy = -T.mean(T.tsum(T.exp(logp_all) * logp_all, axis=-1))
    total = policy + value * value_coef - entropy * entropy_coef

    terms = (policy.item(), value.item(), entropy.item())
    if not all(math.isfinite(x) for x in terms):
        raise NumericError(f"non-finite PPO loss terms (policy, value, entropy) = {terms}")
    log_ratio = new_logp.data - np.asarray(batch["log_probs"])
    approx_kl = float(0.5 * np.mean(log_ratio**2))
    clip_frac = float(np.mean(np.abs(np.exp(log_ratio) - 1.0) > clip_eps))
    return LossTerms(total, *terms, approx_kl, clip_frac)


# -- optimiser ------------------------------------------------------------------
@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def clip_grad_norm(grads: list[np.ndarray], max_norm: float | None) -> tuple[list[np.ndarray], float]:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    scale = max_norm / (norm + 1e-6)
    return [g * scale for g in grads], norm


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    max_grad_norm: float | None = 0.5,
) -> float:
    """Clip the global gradient norm, then take one bias-corrected Adam step in place.

    Returns the pre-clipping gradient norm.
    """
    grads, norm = clip_grad_norm(grads, max_grad_norm)
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(p.dtype, copy=False)
        tmp = np.empty_like(m)
        m *= b1
        np.multiply(g, 1 - b1, out=tmp)
        m += tmp
        v *= b2
        np.multiply(g, g, out=tmp)
        tmp *= 1 - b2
        v += tmp
        # p -= lr * (m / c1) / (sqrt(v / c2) + eps), without temporaries
        np.sqrt(v, out=tmp)
        tmp *= 1.0 / math.sqrt(c2)
        tmp += eps
        np.divide(m, tmp, out=tmp)
        tmp *= lr / c1
        p.data -= tmp
    return norm


def ppo_update(net, opt: AdamState, buffer: RolloutBuffer, config: PPOConfig, lr: float, rng: np.random.Generator) -> dict:
    """Epochs x minibatches of clipped-objective gradient steps on one rollout."""
    data = buffer.flat()
    n = len(data["actions"])
    size = n // config.minibatches
    params = net.parameters()
    stats = {"policy_loss": [], "value_loss": [], "entropy": [], "approx_kl": [], "clip_frac": []}
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for k in range(config.minibatches):
            idx = np.sort(order[k * size : (k + 1) * size])
            batch = {key: arr[idx] for key, arr in data.items()}
            batch["advantages"] = normalize_advantages(batch["advantages"])
            with T.Tape() as tape:
                terms = ppo_loss(net, batch, config.clip_eps, config.value_coef, config.entropy_coef)
            grads = tape.gradient(terms.total, params)
            adam_step(params, grads, opt, lr, max_grad_norm=config.max_grad_norm)
            stats["policy_loss"].append(terms.policy)
            stats["value_loss"].append(terms.value)
            stats["entropy"].append(terms.entropy)
            stats["approx_kl"].append(terms.approx_kl)
            stats["clip_frac"].append(terms.clip_frac)
    return {k: float(np.mean(v)) for k, v in stats.items()}


# -- training loop --------------------------------------------------------------
class MaxOfMeans:
    """Running maximum of a sequence of (possibly missing) mean returns."""

    def __init__(self):
        self.value = float("nan")

    def update(self, mean: float) -> float:
        if math.isfinite(mean) and not (mean <= self.value):
            self.value = float(mean)
        return self.value


@dataclass
class TrainResult:
    net: PolicyValueNet
    metrics: list[dict]
    optimizer: AdamState
    timestep: int
    rng_state: dict
    episode_returns: list[float] = field(default_factory=list)

    @property
    def max_avg_return(self) -> float:
        return self.metrics[-1]["max_avg_return"] if self.metrics else float("nan")


def train(
    variant,
    env,
    config: PPOConfig,
    seed: int,
    *,
    env_params: dict | None = None,
    metrics_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    checkpoint_every: int = 0,
    target_return: float | None = None,
    target_patience: int = 3,
    dtype=np.float32,
    callback: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train a fresh `variant` network with PPO.

    Metrics (one row per update) are appended to `metrics_path` as CSV. With
    `target_return`, training stops early once the windowed mean return has
    stayed at or above the target for `target_patience` consecutive updates.
    A numeric failure aborts training after writing the last good parameters
    to ``<checkpoint_dir>/last_good.ckpt``.
    """
    from .checkpoint import save_checkpoint

    factory = env_factory(env, **(env_params or {}))
    ss = np.random.SeedSequence(seed)
    pool_seed, act_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    pool = EnvPool(factory, config.workers, pool_seed, config.noop_max, config.skip)
    net = build_network(variant, pool.num_actions, seed, dtype=dtype)
    opt = AdamState.zeros(net.parameters())
    rng = np.random.default_rng(act_seed)

    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)

    recent: deque[float] = deque(maxlen=config.return_window)
    best = MaxOfMeans()
    metrics: list[dict] = []
    timestep = 0
    streak = 0
    try:
        for update in range(1, config.num_updates + 1):
            frac = 1.0 - (update - 1) / config.num_updates if config.lr_decay else 1.0
            lr = config.learning_rate * frac
            snapshot = {k: p.data.copy() for k, p in net.params.items()}
            buffer = collect_rollout(net, pool, config.horizon, rng)
            buffer.finalize(config.gamma, config.gae_lambda)
            timestep += config.batch_size
            try:
                stats = ppo_update(net, opt, buffer, config, lr, rng)
            except NumericError:
                if checkpoint_dir is not None:
                    for k, arr in snapshot.items():
                        net.params[k].data = arr
                    save_checkpoint(checkpoint_dir / "last_good.ckpt", net, opt, timestep - config.batch_size, rng)
                log.error("numeric failure at timestep %d; last good parameters kept", timestep)
                raise
            recent.extend(pool.completed)
            pool.completed.clear()
            mean_return = float(np.mean(recent)) if recent else float("nan")
            row = {
                "timestep": timestep,
                "mean_return": mean_return,
                "max_avg_return": best.update(mean_return),
                "policy_loss": stats["policy_loss"],
                "value_loss": stats["value_loss"],
                "entropy": stats["entropy"],
            }
            metrics.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
                fh.flush()
            log.info(
                "update %d/%d t=%d mean_return=%.3f entropy=%.3f kl=%.4f",
                update, config.num_updates, timestep, mean_return, stats["entropy"], stats["approx_kl"],
            )
            if callback is not None:
                callback(dict(row, update=update, approx_kl=stats["approx_kl"], clip_frac=stats["clip_frac"]))
            if checkpoint_dir is not None and checkpoint_every and update % checkpoint_every == 0:
                save_checkpoint(checkpoint_dir / f"step_{timestep:09d}.ckpt", net, opt, timestep, rng)
            if target_return is not None:
                streak = streak + 1 if mean_return >= target_return else 0
                if streak >= target_patience:
                    break
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir / "final.ckpt", net, opt, timestep, rng)
    return TrainResult(net, metrics, opt, timestep, rng.bit_generator.state, list(recent))


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


# -- evaluation -----------------------------------------------------------------
class EvalResult(NamedTuple):
    mean: float
    max: float
    returns: list[float]


def evaluate_policy(
    net,
    env,
    episodes: int,
    seed: int,
    *,
    greedy: bool = False,
    env_params: dict | None = None,
    noop_max: int = 30,
    parallel: int = 8,
    tracker: MaxOfMeans | None = None,
) -> EvalResult:
    """Play `episodes` full episodes with no-op starts and report mean and max return.

    Episodes are spread over up to `parallel` pipelines that each play a fixed
    quota, so the sample is not biased toward short episodes. When a
    `tracker` is given its running max-of-means is updated.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    factory = env_factory(env, **(env_params or {}))
    n = min(parallel, episodes)
    quota = [episodes // n + (i < episodes % n) for i in range(n)]
    ss = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(n + 1)]
    rng = np.random.default_rng(seeds[-1])
    pipes = [AtariPipeline(factory(), noop_max=noop_max) for _ in range(n)]
    obs = np.stack([p.reset(s) for p, s in zip(pipes, seeds)])
    active = [q > 0 for q in quota]
    returns: list[float] = []
    while any(active):
        idx = [i for i in range(n) if active[i]]
        out = net(obs[idx])
        actions, _ = sample_actions(np.atleast_2d(out.logits.data), rng, greedy=greedy)
        for i, a in zip(idx, actions):
            o, _, done, info = pipes[i].step(int(a))
            if done:
                returns.append(info["episode_return"])
                quota[i] -= 1
                if quota[i] == 0:
                    active[i] = False
                    continue
                o = pipes[i].reset()
            obs[i] = o
    result = EvalResult(float(np.mean(returns)), float(np.max(returns)), returns)
    if tracker is not None:
        tracker.update(result.mean)
    return result
