"""Run-directory bookkeeping behind the command-line interface."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .config import ConfigError, RunConfig
from .envs import AtariPipeline, make_env
from .gradcam import grad_cam, peak_location, render_overlay
from .imaging import FrameDumper, write_ppm
from .networks import net_forward
from .ppo import MaxOfMeans, evaluate_policy, sample_actions, train

log = logging.getLogger(__name__)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "timestep" else float(v)) for k, v in row.items()} for row in rows]


def summarize(per_seed: dict[int, list[dict]]) -> dict:
    """Headline statistic over seeds.

    ``max_of_seed_mean``: at each logged point average mean_return over the
    seeds, then take the maximum over points (points where any seed has no
    finished episode yet are skipped). ``mean_of_seed_max`` is the
    alternative reading, each seed's maximum averaged over seeds.
    """
    seeds = sorted(per_seed)
    length = min(len(per_seed[s]) for s in seeds)
    best = MaxOfMeans()
    best_step = None
    for i in range(length):
        vals = [per_seed[s][i]["mean_return"] for s in seeds]
        if all(math.isfinite(v) for v in vals):
            avg = sum(vals) / len(vals)
            before = best.value
            best.update(avg)
            if best.value != before and not (math.isnan(before) and math.isnan(best.value)):
                best_step = per_seed[seeds[0]][i]["timestep"]
    seed_max = {}
    for s in seeds:
        finite = [r["mean_return"] for r in per_seed[s] if math.isfinite(r["mean_return"])]
        seed_max[s] = max(finite) if finite else float("nan")
    return {
        "seeds": seeds,
        "max_of_seed_mean": best.value,
        "max_of_seed_mean_timestep": best_step,
        "mean_of_seed_max": float(np.mean(list(seed_max.values()))),
        "per_seed_max": {str(s): v for s, v in seed_max.items()},
        "per_seed_final": {str(s): per_seed[s][-1]["mean_return"] if per_seed[s] else float("nan") for s in seeds},
    }


def _train_one(cfg: RunConfig, seed: int, dump_frames: str | None = None) -> list[dict]:
    seed_dir = Path(cfg.out) / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    env_params = dict(cfg.env_params)
    result = train(
        cfg.variant,
        lambda: make_env(cfg.env, **env_params),
        cfg.ppo,
        seed,
        metrics_path=seed_dir / "metrics.csv",
        checkpoint_dir=seed_dir / "checkpoints",
        checkpoint_every=cfg.checkpoint_every,
        target_return=cfg.target_return,
    )
    if cfg.eval_episodes > 0:
        ev = evaluate_policy(result.net, lambda: make_env(cfg.env, **env_params), cfg.eval_episodes, seed + 10_000, greedy=cfg.eval_greedy)
        (seed_dir / "eval.json").write_text(json.dumps({"mean": ev.mean, "max": ev.max, "returns": ev.returns}, indent=2))
    if dump_frames:
        _dump_episode_frames(cfg, seed, result.net, Path(dump_frames) / f"seed_{seed}")
    return result.metrics


def _dump_episode_frames(cfg: RunConfig, seed: int, net, out_dir: Path) -> None:
    pipe = AtariPipeline(make_env(cfg.env, **cfg.env_params), frame_dump=FrameDumper(out_dir))
    obs = pipe.reset(seed)
    rng = np.random.default_rng(seed)
    done = False
    while not done:
        action, _ = sample_actions(net(obs[None]).logits.data, rng)
        obs, _, done, _ = pipe.step(int(action[0]))


def cmd_train(cfg: RunConfig, jobs: int = 1, dump_frames: str | None = None) -> dict:
    """Train one run per seed under ``cfg.out`` and write summary.json/summary.csv."""
    try:
        make_env(cfg.env, **cfg.env_params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid environment settings: {exc}") from None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.txt")
    (out / "VERSION").write_text(__version__ + "\n")

    if jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {s: pool.submit(_train_one, cfg, s, dump_frames) for s in cfg.seeds}
            per_seed = {s: f.result() for s, f in futures.items()}
    else:
        per_seed = {s: _train_one(cfg, s, dump_frames) for s in cfg.seeds}

    summary = summarize(per_seed)
    summary.update(variant=cfg.variant, env=cfg.env, timesteps=cfg.ppo.total_timesteps)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "env", "seeds", "max_of_seed_mean", "mean_of_seed_max"])
        w.writerow([cfg.variant, cfg.env, " ".join(map(str, cfg.seeds)), repr(summary["max_of_seed_mean"]), repr(summary["mean_of_seed_max"])])
    return summary


def learning_curve(run_dir) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Timesteps, seed-mean and seed-std of mean_return for one run directory."""
    run_dir = Path(run_dir)
    tables = [read_metrics(p) for p in sorted(run_dir.glob("seed_*/metrics.csv"))]
    if not tables:
        raise FileNotFoundError(f"no seed_*/metrics.csv under {run_dir}")
    n = min(len(t) for t in tables)
    steps = np.array([tables[0][i]["timestep"] for i in range(n)])
    vals = np.array([[t[i]["mean_return"] for i in range(n)] for t in tables])
    return steps, vals.mean(axis=0), vals.std(axis=0)


def write_curves_csv(path, runs: dict[str, str]) -> None:
    """Side-by-side learning curves (one mean/std column pair per run)."""
    curves = {name: learning_curve(d) for name, d in runs.items()}
    n = min(len(c[0]) for c in curves.values())
    first = next(iter(curves.values()))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["timestep"]
        for name in curves:
            header += [f"{name}_mean", f"{name}_std"]
        w.writerow(header)
        for i in range(n):
            row = [int(first[0][i])]
            for steps, mu, sd in curves.values():
                row += [repr(float(mu[i])), repr(float(sd[i]))]
            w.writerow(row)


def _check_env_matches(ckpt, env_name: str, env_params: dict):
    env = make_env(env_name, **env_params)
    if env.num_actions != ckpt.num_actions:
        raise ConfigError(
            f"checkpoint network has {ckpt.num_actions} actions but {env_name} has {env.num_actions}"
        )
    return env


def cmd_evaluate(checkpoint, env: str, episodes: int = 10, seed: int = 0, greedy: bool = False, env_params: dict | None = None, variant=None) -> dict:
    ckpt = load_checkpoint(checkpoint, variant)
    _check_env_matches(ckpt, env, env_params or {})
    net = ckpt.to_network()
    res = evaluate_policy(net, lambda: make_env(env, **(env_params or {})), episodes, seed, greedy=greedy)
    return {"mean": res.mean, "max": res.max, "episodes": len(res.returns), "returns": res.returns}


def cmd_visualize(checkpoint, env: str, episodes: int, out_dir, seed: int = 0, env_params: dict | None = None, variant=None, max_steps: int | None = None) -> dict:
    """Roll greedy episodes and write one overlay per step plus per-block attention dumps.

    Overlays are ``<episode>_<step>_<action>.ppm``; attention matrices are
    ``<episode>_<step>_block<i>.npy``; ``steps.csv`` lists the map peak for
    every step.
    """
    ckpt = load_checkpoint(checkpoint, variant)
    _check_env_matches(ckpt, env, env_params or {})
    net = ckpt.to_network()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pipe = AtariPipeline(make_env(env, **(env_params or {})))
    rng = np.random.default_rng(seed)
    written = {"overlays": 0, "attention": 0}
    with open(out_dir / "steps.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "step", "action", "peak_row", "peak_col"])
        for ep in range(episodes):
            obs = pipe.reset(int(rng.integers(2**31)))
            step = 0
            done = False
            while not done and (max_steps is None or step < max_steps):
                fwd = net_forward(net, obs)
                action = int(np.argmax(fwd.logits.data))
                amap = grad_cam(net, obs, action)
                write_ppm(out_dir / f"{ep}_{step}_{action}.ppm", render_overlay(amap, obs))
                written["overlays"] += 1
                for b, attn in enumerate(fwd.attn_maps):
                    np.save(out_dir / f"{ep}_{step}_block{b}.npy", attn.data.astype(np.float32))
                    written["attention"] += 1
                w.writerow([ep, step, action, *peak_location(amap)])
                obs, _, done, _ = pipe.step(action)
                step += 1
    return written
