import csv
import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ifttrust import cli
from ifttrust.config import ConfigError, load_config, parse_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

BASE = """
seed = 0
prior = "flat"

[mesh]
dim = 1
extent = [0.0, 1.0]
nodes = 18

[source]
kind = "sine"
amplitude = 9.869604401089358

[truth]
kind = "perturbed"
scale = 1.0

[truth.perturbation]
kind = "parabola"
amplitude = 10.0

[measurement]
design = "uniform"
density = 32
noise = 1e-3
"""


def _write(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    err = capsys.readouterr().err
    return code, err


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_infer_writes_all_artifacts(tmp_path, capsys):
    cfg = _write(tmp_path, BASE)
    code, err = _run(["infer", "--config", cfg, "--out", tmp_path / "out"], capsys)
    assert code == 0, err
    out = tmp_path / "out"
    report = json.loads((out / "trust_report.json").read_text())
    assert report["diverged"] is False and report["beta_hat"] > 0
    assert report["n"] == 16 and report["observations"] == 31
    assert report["grad_residual"] <= 1e-8
    grid = _read_csv(out / "posterior_grid.csv")
    assert len(grid) == 101 and set(grid[0]) == {"beta", "H", "grad", "hessian", "margin"}
    fields = _read_csv(out / "fields.csv")
    assert len(fields) == 16 and set(fields[0]) == {"x", "mean", "variance", "truth"}
    assert all(float(r["variance"]) >= 0 for r in fields)
    assert not list(out.glob(".*"))


def test_infer_is_deterministic(tmp_path, capsys):
    cfg = _write(tmp_path, BASE)
    for name in ("a", "b"):
        assert _run(["infer", "--config", cfg, "--out", tmp_path / name], capsys)[0] == 0
    for f in ("trust_report.json", "posterior_grid.csv", "fields.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_correct_model_reports_divergence(tmp_path, capsys):
    out = tmp_path / "out"
    code, err = _run(["infer", "--config", CONFIGS / "correct_model.toml", "--out", out], capsys)
    assert code == 0, err
    report = json.loads((out / "trust_report.json").read_text())
    assert report["diverged"] is True and report["beta_hat"] == "inf"
    fields = _read_csv(out / "fields.csv")
    assert all(float(r["variance"]) == 0.0 for r in fields)


@pytest.mark.parametrize("edit", [
    ("nodes = 18", "nodes = 18\ncolour = 1"),
    ('prior = "flat"', 'prior = "uniform"'),
    ("noise = 1e-3", "noise = -1.0"),
    ("density = 32", "density = 1"),
    ('kind = "sine"', 'kind = "cosine"'),
    ("seed = 0", "seed = -4"),
    ("dim = 1", "dim = 3"),
])
def test_invalid_config_exit_2(tmp_path, capsys, edit):
    cfg = _write(tmp_path, BASE.replace(*edit))
    out = tmp_path / "out"
    code, err = _run(["infer", "--config", cfg, "--out", out], capsys)
    assert code == 2
    record = json.loads(err)
    assert record["status"] == "error" and record["exit_code"] == 2
    assert not out.exists() or not any(out.iterdir())


def test_missing_and_unparsable_config(tmp_path, capsys):
    assert _run(["infer", "--config", tmp_path / "none.toml", "--out", tmp_path], capsys)[0] == 2
    bad = _write(tmp_path, "seed = = 1")
    assert _run(["infer", "--config", bad, "--out", tmp_path / "o"], capsys)[0] == 2


def test_jeffreys_rejected_on_tiny_mesh(tmp_path):
    text = BASE.replace('prior = "flat"', 'prior = "jeffreys"').replace("nodes = 18", "nodes = 4")
    with pytest.raises(ConfigError, match="Jeffreys"):
        load_config(_write(tmp_path, text))


def test_csv_design_ingestion(tmp_path, capsys):
    x = np.linspace(0.05, 0.95, 19)
    d = np.sin(np.pi * x) + 0.3 * x * (1 - x)
    lines = ["x,d"] + [f"{a},{b}" for a, b in zip(x.tolist(), d.tolist())]
    (tmp_path / "obs.csv").write_text("\n".join(lines) + "\n")
    text = BASE.split("[measurement]")[0] + '[measurement]\ndesign = "csv"\npath = "obs.csv"\nnoise = 1e-3\n'
    cfg = _write(tmp_path, text)
    code, err = _run(["infer", "--config", cfg, "--out", tmp_path / "out"], capsys)
    assert code == 0, err
    report = json.loads((tmp_path / "out" / "trust_report.json").read_text())
    assert report["observations"] == 19


@pytest.mark.parametrize("body", [
    "x,d\n0.5,abc\n",
    "x,q\n0.5,1.0\n",
    "x,d\n1.5,1.0\n",
    "x,d\n",
    "x,d\n0.5,nan\n",
])
def test_malformed_csv_exit_2_without_output(tmp_path, capsys, body):
    (tmp_path / "obs.csv").write_text(body)
    text = BASE.split("[measurement]")[0] + '[measurement]\ndesign = "csv"\npath = "obs.csv"\nnoise = 1e-3\n'
    cfg = _write(tmp_path, text)
    out = tmp_path / "out"
    code, err = _run(["infer", "--config", cfg, "--out", out], capsys)
    assert code == 2
    assert json.loads(err)["error"] == "config"
    assert not out.exists()


def test_sweep_outputs(tmp_path, capsys):
    text = BASE + "\n[sweep]\nscales = [1.0, 0.5, 0.25]\ndensities = [4, 8]\n"
    cfg = _write(tmp_path, text.replace("noise = 1e-3", "noise = 1e-5"))
    out = tmp_path / "out"
    code, err = _run(["sweep", "--config", cfg, "--out", out], capsys)
    assert code == 0, err
    rows = _read_csv(out / "sweep.csv")
    assert [float(r["c"]) for r in rows] == [1.0, 0.5, 0.25]
    assert {"c", "n", "h_X", "beta_hat", "diverged", "residual", "margin"} <= set(rows[0])
    conv = _read_csv(out / "convergence.csv")
    assert [int(r["density"]) for r in conv] == [4, 8]
    summary = json.loads((out / "sweep_summary.json").read_text())
    assert summary["sweep"]["monotone"] is True


@pytest.mark.parametrize("sweep", [
    "scales = [1.0]\ndensities = []",
    "scales = [1.0]\ndensities = [4, 6]",
    "scales = []\ndensities = [4]",
])
def test_sweep_rejects_bad_lists(tmp_path, capsys, sweep):
    cfg = _write(tmp_path, BASE + "\n[sweep]\n" + sweep + "\n")
    code, _ = _run(["sweep", "--config", cfg, "--out", tmp_path / "out"], capsys)
    assert code == 2 and not (tmp_path / "out").exists()


def test_sweep_section_defaults(tmp_path):
    cfg = load_config(_write(tmp_path, BASE))
    assert cfg.sweep.scales == (1.0, 0.5, 0.25, 0.125)
    assert cfg.sweep.densities == (8, 16, 32, 64)


def test_verify_success(tmp_path, capsys):
    code, err = _run(["verify", "--seed", 3, "--instances", 5, "--out", tmp_path], capsys)
    assert code == 0, err
    report = json.loads((tmp_path / "verify.json").read_text())
    assert report["status"] == "pass" and report["seed"] == 3


def test_verify_failure_exit_4(tmp_path, capsys, monkeypatch):
    import ifttrust.verification as ver

    real = ver.quadratic_mean_closed
    monkeypatch.setattr(ver, "quadratic_mean_closed", lambda A, m, D: 1.05 * real(A, m, D))
    code, err = _run(["verify", "--seed", 0, "--instances", 5, "--out", tmp_path], capsys)
    assert code == 4
    assert json.loads(err)["error"] == "verification"
    report = json.loads((tmp_path / "verify.json").read_text())
    assert report["checks"]["quadratic_mean_mc"]["status"] == "fail"


def test_verify_rejects_bad_arguments(tmp_path, capsys):
    assert _run(["verify", "--instances", 0, "--out", tmp_path], capsys)[0] == 2


def test_solver_failure_exit_3(tmp_path, capsys, monkeypatch):
    from ifttrust.trust import TrustSolveError

    def boom(*a, **k):
        raise TrustSolveError("no root")

    monkeypatch.setattr(cli, "solve_trust", boom)
    cfg = _write(tmp_path, BASE)
    code, err = _run(["infer", "--config", cfg, "--out", tmp_path / "out"], capsys)
    assert code == 3 and json.loads(err)["message"] == "no root"
    assert not (tmp_path / "out").exists()


def test_shipped_configs_parse():
    for path in sorted(CONFIGS.glob("*.toml")):
        cfg = load_config(path)
        assert cfg.mesh.interior_count > 0


def test_parse_config_resolves_relative_paths(tmp_path):
    raw = {
        "mesh": {"dim": 1, "extent": [0.0, 1.0], "nodes": 6},
        "source": {"kind": "csv", "path": "q.csv"},
        "truth": {"kind": "model"},
        "measurement": {"design": "uniform", "density": 4, "noise": 0.1},
    }
    cfg = parse_config(raw, tmp_path)
    assert cfg.source.path == tmp_path / "q.csv"
    rows = "\n".join(f"{x},1.0" for x in cfg.mesh.interior_coordinates[:, 0].tolist())
    (tmp_path / "q.csv").write_text("x,q\n" + rows + "\n")
    assert np.array_equal(cfg.source.evaluate(cfg.mesh), np.ones(4))


def test_truth_csv_with_wrong_node_count(tmp_path, capsys):
    (tmp_path / "phi.csv").write_text("x,phi\n0.5,1.0\n")
    text = BASE.replace('kind = "perturbed"\nscale = 1.0\n\n[truth.perturbation]\nkind = "parabola"\n'
                        'amplitude = 10.0', 'kind = "csv"\npath = "phi.csv"')
    cfg = _write(tmp_path, text)
    code, err = _run(["infer", "--config", cfg, "--out", tmp_path / "out"], capsys)
    assert code == 2 and "interior" in json.loads(err)["message"]


def test_console_script_round_trip(tmp_path):
    exe = shutil.which("ifttrust")
    cmd = [exe] if exe else [sys.executable, "-m", "ifttrust.cli"]
    res = subprocess.run(cmd + ["infer", "--config", str(CONFIGS / "mismatch.toml"),
                                "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert json.loads((tmp_path / "trust_report.json").read_text())["diverged"] is False
    res = subprocess.run(cmd + ["infer"], capture_output=True, text=True)
    assert res.returncode == 2
