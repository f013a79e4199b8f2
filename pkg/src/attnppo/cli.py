"""Command-line entry point: ``attnppo {train,evaluate,visualize,gradcheck}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, parse_value
from .envs import EnvConfigError


def _kv_pairs(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attnppo", description="Self-attention PPO agents on toy Atari-style games.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every PPO update")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one run per seed")
    t.add_argument("--config", help="key = value configuration file")
    t.add_argument("--variant")
    t.add_argument("--env")
    t.add_argument("--env-param", action="append", metavar="KEY=VALUE", help="environment parameter (repeatable)")
    t.add_argument("--seeds", help="comma-separated seeds")
    t.add_argument("--timesteps", type=int)
    t.add_argument("--out")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (repeatable)")
    t.add_argument("--jobs", type=int, default=1, help="train seeds concurrently in separate processes")
    t.add_argument("--deterministic", action="store_true", help="force sequential single-process training")
    t.add_argument("--dump-frames", metavar="DIR", help="after training, write raw/processed frames of one episode")

    e = sub.add_parser("evaluate", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--env", required=True)
    e.add_argument("--env-param", action="append", metavar="KEY=VALUE")
    e.add_argument("--variant", help="reject checkpoints of any other variant")
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--greedy", action="store_true", help="argmax actions instead of sampling")

    v = sub.add_parser("visualize", help="write Grad-CAM overlays and attention dumps")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--env", required=True)
    v.add_argument("--env-param", action="append", metavar="KEY=VALUE")
    v.add_argument("--variant", help="reject checkpoints of any other variant")
    v.add_argument("--episodes", type=int, default=1)
    v.add_argument("--max-steps", type=int, help="cap steps per episode")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference verification of every op and variant")
    g.add_argument("--seeds", type=int, default=5, help="random seeds per network variant")
    g.add_argument("--coords", type=int, default=12, help="sampled coordinates per network check")
    g.add_argument("--tol", type=float, default=1e-4)
    return p


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for key, value in (("variant", args.variant), ("env", args.env), ("seeds", args.seeds), ("total_timesteps", args.timesteps), ("out", args.out)):
        if value is not None:
            cfg.set(key, value if not isinstance(value, str) else value)
    for k, v in _kv_pairs(args.env_param).items():
        cfg.env_params[k] = v
    for k, v in _kv_pairs(args.set).items():
        cfg.set(k, v)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    from . import harness

    try:
        if args.command == "train":
            cfg = _run_config(args)
            jobs = 1 if args.deterministic else args.jobs
            summary = harness.cmd_train(cfg, jobs=jobs, dump_frames=args.dump_frames)
            print(json.dumps(summary, indent=2, sort_keys=True))
        elif args.command == "evaluate":
            res = harness.cmd_evaluate(args.checkpoint, args.env, args.episodes, args.seed, args.greedy, _kv_pairs(args.env_param), args.variant)
            print(json.dumps({k: res[k] for k in ("mean", "max", "episodes")}))
        elif args.command == "visualize":
            res = harness.cmd_visualize(args.checkpoint, args.env, args.episodes, args.out, args.seed, _kv_pairs(args.env_param), args.variant, args.max_steps)
            print(json.dumps(res))
        elif args.command == "gradcheck":
            from .verification import run_suite

            results = run_suite(seeds=args.seeds, coords=args.coords)
            failed = 0
            for name, err in results:
                ok = err < args.tol
                failed += not ok
                print(f"{'PASS' if ok else 'FAIL'} {name:<32} max_rel_err={err:.3e}")
            return 1 if failed else 0
    except (ConfigError, CheckpointError, EnvConfigError, ValueError) as exc:
        print(f"attnppo {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
