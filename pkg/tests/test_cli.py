import json
import shutil
import subprocess
from pathlib import Path

import numpy as np
import pytest
import yaml

from momoe.cli import build_parser, main, verify_mgda
from momoe.config import ConfigError, load_config, parse_config
from momoe.runner import OUTPUT_ROOT_ENV, run_experiment

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY = {
    "name": "tiny",
    "task": {"kind": "tiny_lm", "vocab": 16, "seq_len": 8, "train_sequences": 24, "valid_sequences": 8},
    "model": {"layers": 2, "dim": 8, "experts": 4, "k": 2},
    "dynamics": {"mode": "heavy_ball"},
    "trainer": {"epochs": 2, "batch_size": 8, "lr": 0.01, "seed": 3},
    "output_dir": "runs/tiny",
}


def write_cfg(tmp_path, raw, name="c.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return path


@pytest.mark.parametrize("raw,field", [
    ({"trainer": {"lr": -1.0}}, "trainer.lr"),
    ({"trainer": {"lr": "fast"}}, "trainer.lr"),
    ({"model": {"k": 9, "experts": 8}}, "model.k"),
    ({"task": {"kind": "vision"}}, "task.kind"),
    ({"task": {"vocab": 1000}}, "task.vocab"),
    ({"eval": {"swap_rate": 2.0}}, "eval.swap_rate"),
    ({"dynamics": {"mode": "heavy_ball", "mu": 1.5}}, "dynamics.mu"),
    ({"dynamics": {"mode": "warp"}}, "dynamics.mode"),
    ({"dynamics": [{"mode": "baseline"}]}, "dynamics"),
    ({"model": {"width": 3}}, "model.width"),
    ({"speed": 3}, "speed"),
])
def test_schema_errors_name_the_field(raw, field):
    with pytest.raises(ConfigError) as exc:
        parse_config(raw)
    assert str(exc.value).startswith(field)


def test_per_layer_dynamics_and_adam_first_layer():
    cfg = parse_config({"model": {"layers": 3}, "dynamics": [{"mode": "baseline"}, {"mode": "nag"}, {"mode": "sam"}]})
    assert [d.mode for d in cfg.dynamics] == ["baseline", "nag", "sam"]
    cfg = parse_config({"model": {"layers": 4}, "adam_first_layer": True})
    assert [d.mode for d in cfg.dynamics] == ["adam"] + ["heavy_ball"] * 3


def test_checked_in_configs_parse_and_differ_only_in_dynamics():
    paths = sorted(CONFIGS.glob("*.yaml"))
    assert len(paths) >= 15
    for p in paths:
        load_config(p)
    base = yaml.safe_load((CONFIGS / "lm_baseline.yaml").read_text())
    hb = yaml.safe_load((CONFIGS / "lm_heavy_ball.yaml").read_text())
    diff = {k for k in base if base[k] != hb[k]}
    assert diff == {"name", "dynamics", "output_dir"}
    shallow = yaml.safe_load((CONFIGS / "lm_baseline_3layer.yaml").read_text())
    assert shallow["model"]["layers"] == 3


def test_digest_is_stable():
    a, b = parse_config(TINY), parse_config(json.loads(json.dumps(TINY)))
    assert a.digest() == b.digest()
    assert a.digest() != parse_config({**TINY, "trainer": {**TINY["trainer"], "seed": 4}}).digest()


def test_help_lists_flags(capsys):
    parser = build_parser()
    for cmd, flags in [("sweep-stability", ["--mu-min", "--step", "--guard", "--out"]),
                       ("verify-mgda", ["--trials", "--grid-step"]),
                       ("run", ["--output-root"]), ("diagnose", ["--out"])]:
        with pytest.raises(SystemExit):
            parser.parse_args([cmd, "--help"])
        text = capsys.readouterr().out
        for f in flags:
            assert f in text


def test_console_script_available():
    exe = shutil.which("momoe")
    if exe is None:
        pytest.skip("package not installed as a console script")
    res = subprocess.run([exe, "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "sweep-stability" in res.stdout


def test_sweep_and_verify_commands(tmp_path):
    out = tmp_path / "sweep.csv"
    assert main(["sweep-stability", "--mu-min", "-0.5", "--mu-max", "0.5", "--gs-min", "0", "--gs-max", "2",
                 "--step", "0.25", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    assert lines[1] == "mu,gamma_sigma,lambda1_re,lambda1_im,lambda2_re,lambda2_im,spectral_radius,analytic,empirical"
    assert len(lines) == 2 + 5 * 9
    out = tmp_path / "mgda.csv"
    assert main(["verify-mgda", "--trials", "5", "--out", str(out)]) == 0
    assert out.read_text().splitlines()[1].startswith("trial,E,N,solver_norm")
    rows, ok = verify_mgda(5, 1, 1e-2, tol=1e-3)
    assert ok and len(rows) == 5


def test_run_writes_outputs_under_env_root(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert main(["run", str(write_cfg(tmp_path, TINY))]) == 0
    out = tmp_path / "root" / "runs" / "tiny"
    for name in ("loss_curve.csv", "metrics.csv", "load_histogram.csv", "norm_trace.csv"):
        lines = (out / name).read_text().splitlines()
        assert lines[0].startswith("# config_hash=") and len(lines) > 2
    metrics = dict(line.split(",") for line in (out / "metrics.csv").read_text().splitlines()[2:])
    assert {"valid_loss_clean", "valid_loss_corrupted", "unigram_entropy"} <= set(metrics)
    assert json.loads((out / "timing.json").read_text())["steps"] == 6
    assert (out / "checkpoint.npz").exists()

    diag = tmp_path / "diag"
    assert main(["diagnose", str(out / "checkpoint.npz"), "--out", str(diag)]) == 0
    assert (diag / "load_histogram.csv").read_text() == (out / "load_histogram.csv").read_text()


def test_rerun_is_byte_identical(tmp_path):
    cfg = parse_config(TINY)
    a = run_experiment(cfg, root=tmp_path / "a").output_dir
    b = run_experiment(cfg, root=tmp_path / "b").output_dir
    for name in ("loss_curve.csv", "metrics.csv", "load_histogram.csv", "norm_trace.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_quadratic_task_run(tmp_path):
    raw = yaml.safe_load((CONFIGS / "quad_heavy_ball.yaml").read_text())
    res = run_experiment(parse_config(raw), root=tmp_path)
    lines = (res.output_dir / "trajectory.csv").read_text().splitlines()
    assert lines[1].startswith("layer,x_norm,min_norm_gradient,objective_0")
    assert len(lines) == 2 + 1 + raw["model"]["layers"]


def test_divergence_is_reported(tmp_path, capsys):
    raw = {**TINY, "dynamics": {"mode": "heavy_ball", "mu": 3.0, "gamma": 1e300, "allow_unstable": True},
           "output_dir": str(tmp_path / "div")}
    assert main(["run", str(write_cfg(tmp_path, raw))]) == 3
    report = json.loads((tmp_path / "div" / "divergence.json").read_text())
    assert report["layer"] is not None and report["step"] == 0
    assert "diverged at layer" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    assert main(["run", str(write_cfg(tmp_path, {"trainer": {"epochs": 0}}))]) == 2
    assert "trainer.epochs" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.yaml")]) == 2
    assert main(["diagnose", str(tmp_path / "missing.npz")]) == 2
