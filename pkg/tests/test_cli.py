import json
import math
import os

import numpy as np
import pytest

from attnppo.cli import main
from attnppo.config import ConfigError, RunConfig, parse_value
from attnppo.harness import read_metrics, summarize, write_curves_csv
from attnppo.imaging import read_pnm

TINY = ["--set", "horizon=16", "--set", "workers=2", "--set", "minibatches=2", "--set", "epochs=1", "--set", "eval_episodes=2"]


# -- configuration -----------------------------------------------------------------
def test_parse_value():
    assert parse_value("3") == 3
    assert parse_value("2.5e-4") == 2.5e-4
    assert parse_value("true") is True
    assert parse_value("none") is None
    assert parse_value("0,1,2") == (0, 1, 2)
    assert parse_value("SAN") == "SAN"


def test_config_round_trip(tmp_path):
    cfg = RunConfig(variant="ssadn", seeds=(4, 5))
    cfg.set("env.blink_period", "4")
    cfg.set("lr", "1e-3")
    cfg.set("timesteps", 2048)
    cfg.dump(tmp_path / "c.txt")
    back = RunConfig.load(tmp_path / "c.txt")
    assert back == cfg
    assert back.variant == "SSADN" and back.ppo.learning_rate == 1e-3 and back.env_params == {"blink_period": 4}


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig(variant="nope")
    with pytest.raises(ConfigError):
        RunConfig().set("bogus", 1)
    with pytest.raises(ConfigError):
        RunConfig().set("clip_eps", 3)
    with pytest.raises(ConfigError):
        RunConfig().set("seeds", "1,1")
    (tmp_path / "bad.txt").write_text("variant SAN\n")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "bad.txt")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.txt")


def test_config_comments_and_single_seed():
    cfg = RunConfig.from_lines(["# a comment", "seeds = 7  # trailing", "", "env = corridor"])
    assert cfg.seeds == (7,) and cfg.env == "corridor"


# -- summary statistic ---------------------------------------------------------------
def test_summary_headline_is_max_of_seed_means():
    rows = lambda vals: [{"timestep": 100 * (i + 1), "mean_return": v} for i, v in enumerate(vals)]
    per_seed = {0: rows([float("nan"), 1.0, 3.0, 2.0]), 1: rows([0.5, 2.0, 1.0, 5.0])}
    s = summarize(per_seed)
    assert s["max_of_seed_mean"] == 3.5
    assert s["max_of_seed_mean_timestep"] == 400
    assert s["mean_of_seed_max"] == 4.0


# -- command line ---------------------------------------------------------------------------
@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    code = main(
        ["train", "--variant", "SAN", "--env", "corridor", "--seeds", "0,1", "--timesteps", "96", "--out", str(root / "san"), "--set", "checkpoint_every=2"]
        + TINY
    )
    assert code == 0
    return root


def test_train_writes_self_describing_run(trained):
    run = trained / "san"
    for name in ("config.txt", "VERSION", "summary.json", "summary.csv"):
        assert (run / name).exists()
    for seed in (0, 1):
        assert (run / f"seed_{seed}" / "metrics.csv").exists()
        assert (run / f"seed_{seed}" / "checkpoints" / "final.ckpt").exists()
        assert (run / f"seed_{seed}" / "checkpoints" / "step_000000064.ckpt").exists()
        assert (run / f"seed_{seed}" / "eval.json").exists()
    cfg = RunConfig.load(run / "config.txt")
    assert cfg.variant == "SAN" and cfg.seeds == (0, 1) and cfg.ppo.total_timesteps == 96


def test_summary_matches_recomputation_from_metrics(trained):
    run = trained / "san"
    summary = json.loads((run / "summary.json").read_text())
    tables = [read_metrics(run / f"seed_{s}" / "metrics.csv") for s in (0, 1)]
    means = [
        (a["mean_return"] + b["mean_return"]) / 2
        for a, b in zip(*tables)
        if math.isfinite(a["mean_return"]) and math.isfinite(b["mean_return"])
    ]
    assert summary["max_of_seed_mean"] == max(means)


def test_rerun_from_config_reproduces_metrics(trained, tmp_path):
    run = trained / "san"
    code = main(["train", "--config", str(run / "config.txt"), "--out", str(tmp_path / "again"), "--deterministic"])
    assert code == 0
    for s in (0, 1):
        assert (tmp_path / "again" / f"seed_{s}" / "metrics.csv").read_bytes() == (run / f"seed_{s}" / "metrics.csv").read_bytes()
    assert json.loads((tmp_path / "again" / "summary.json").read_text()) == json.loads((run / "summary.json").read_text())


def test_parallel_seeds_match_sequential(trained, tmp_path):
    run = trained / "san"
    assert main(["train", "--config", str(run / "config.txt"), "--out", str(tmp_path / "par"), "--jobs", "2"]) == 0
    for s in (0, 1):
        assert (tmp_path / "par" / f"seed_{s}" / "metrics.csv").read_bytes() == (run / f"seed_{s}" / "metrics.csv").read_bytes()


def test_evaluate_command(trained, capsys):
    ckpt = trained / "san" / "seed_0" / "checkpoints" / "final.ckpt"
    assert main(["evaluate", "--checkpoint", str(ckpt), "--env", "corridor", "--episodes", "3"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["episodes"] == 3 and 0.0 <= out["mean"] <= 1.0


def test_visualize_writes_overlays_and_attention(trained, tmp_path):
    ckpt = trained / "san" / "seed_0" / "checkpoints" / "final.ckpt"
    args = ["visualize", "--checkpoint", str(ckpt), "--env", "corridor", "--episodes", "2", "--max-steps", "3", "--seed", "4"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    ppms = sorted(p.name for p in (tmp_path / "a").glob("*.ppm"))
    npys = sorted((tmp_path / "a").glob("*.npy"))
    assert ppms and len(npys) == len(ppms)
    assert np.load(npys[0]).shape == (400, 400)
    ep, step, action = ppms[0][:-4].split("_")
    assert ep == "0" and action.isdigit()
    img = read_pnm(tmp_path / "a" / ppms[0])
    assert img.shape == (84, 84, 3)
    for name in ppms:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    lines = (tmp_path / "a" / "steps.csv").read_text().splitlines()
    assert lines[0] == "episode,step,action,peak_row,peak_col" and len(lines) == len(ppms) + 1


def test_visualize_baseline_emits_no_attention(tmp_path):
    assert main(["train", "--variant", "BASELINE", "--env", "corridor", "--seeds", "0", "--timesteps", "32", "--out", str(tmp_path / "b")] + TINY) == 0
    ckpt = tmp_path / "b" / "seed_0" / "checkpoints" / "final.ckpt"
    assert main(["visualize", "--checkpoint", str(ckpt), "--env", "corridor", "--max-steps", "2", "--out", str(tmp_path / "v")]) == 0
    assert list((tmp_path / "v").glob("*.ppm")) and not list((tmp_path / "v").glob("*.npy"))


def test_usage_errors_exit_nonzero(trained, tmp_path, capsys):
    ckpt = str(trained / "san" / "seed_0" / "checkpoints" / "final.ckpt")
    assert main(["visualize", "--checkpoint", ckpt, "--env", "blinkingchase", "--out", str(tmp_path)]) == 2
    assert "actions" in capsys.readouterr().err
    assert main(["evaluate", "--checkpoint", ckpt, "--env", "corridor", "--variant", "SADN"]) == 2
    assert main(["evaluate", "--checkpoint", str(tmp_path / "none.ckpt"), "--env", "corridor"]) == 2
    assert main(["train", "--variant", "BOGUS", "--out", str(tmp_path / "x")]) == 2
    assert main(["train", "--env", "pong", "--out", str(tmp_path / "x")]) == 2
    assert main(["train", "--set", "nonsense=1", "--out", str(tmp_path / "x")]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code != 0


def test_train_can_dump_frames(tmp_path):
    args = ["train", "--variant", "BASELINE", "--env", "corridor", "--seeds", "0", "--timesteps", "32", "--out", str(tmp_path / "r"), "--dump-frames", str(tmp_path / "frames")]
    assert main(args + TINY) == 0
    raws = sorted((tmp_path / "frames" / "seed_0").glob("*_raw.ppm"))
    procs = sorted((tmp_path / "frames" / "seed_0").glob("*_proc.pgm"))
    assert raws and len(raws) == len(procs)
    assert read_pnm(raws[0]).shape == (210, 160, 3)
    assert read_pnm(procs[0]).shape == (84, 84)


def test_curves_csv(trained, tmp_path):
    write_curves_csv(tmp_path / "curves.csv", {"SAN": trained / "san"})
    lines = (tmp_path / "curves.csv").read_text().splitlines()
    assert lines[0] == "timestep,SAN_mean,SAN_std"
    assert len(lines) == 1 + 96 // 32


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seeds", "1", "--coords", "2"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert all(line.startswith("PASS") for line in out)
    assert any("PSADN" in line for line in out) and any("op/attention" in line for line in out)


def test_console_script_installed():
    import shutil

    exe = shutil.which("attnppo")
    if exe is None:
        pytest.skip("package not installed with console scripts")
    assert os.access(exe, os.X_OK)
