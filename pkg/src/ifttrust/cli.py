"""Batch driver: ``ifttrust infer | sweep | verify``.

Exit codes: 0 success, 2 config error, 3 solver failure, 4 verification
failure. On any failure a JSON error record goes to stderr and no output
file is written; successful runs write every artifact via temp-then-rename.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .calculus import centered_posterior, potential_calculus
from .config import ConfigError, ExperimentConfig, load_config, read_nodal_values, read_table
from .free_theory import BetaPrior, ParameterState, marginal_neg_log_posterior
from .mesh import build_laplacian, build_measurement, design_metrics, green_operator, uniform_design
from .trust import (
    TrustSolveError,
    convergence_study,
    model_error_sweep,
    solve_trust,
    synthesize_data,
)
from .verification import run_verification

__all__ = ["main", "build_problem", "run_infer", "run_sweep", "run_verify"]

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VERIFY = 0, 2, 3, 4


class VerificationFailed(RuntimeError):
    pass


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def _json_text(obj) -> str:
    return json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n"


def write_atomic(out_dir: Path, files: dict) -> None:
    """Write ``{name: text}`` into ``out_dir``; each file appears via rename."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    staged = []
    try:
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=out_dir)
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            staged.append((tmp, out_dir / name))
        for tmp, final in staged:
            os.replace(tmp, final)
    finally:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)


class Problem:
    """Mesh operators, source, truth and data assembled from a config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        mesh = cfg.mesh
        self.mesh = mesh
        self.L = build_laplacian(mesh)
        self.G = green_operator(self.L)
        self.q = cfg.source.evaluate(mesh)
        base = self.G.entries @ self.q
        truth = cfg.truth
        if truth.kind == "model":
            self.phi_star = base
            self.psi0 = np.zeros_like(base)
        elif truth.kind == "perturbed":
            self.psi0 = self.G.entries @ truth.perturbation.evaluate(mesh)
            self.phi_star = base + truth.scale * self.psi0
        else:
            self.phi_star = read_nodal_values(mesh, truth.path, "phi")
            self.psi0 = self.phi_star - base
        self.psi_star = self.phi_star - base
        meas = cfg.measurement
        noise_var = meas.noise**2
        if meas.design == "uniform":
            loc = uniform_design(mesh, meas.density)
            setup = build_measurement(mesh, loc, noise_var)
            self.setup = synthesize_data(setup, self.phi_star, cfg.seed)
            self.truth_known = True
        else:
            cols = ["x", "y"][: mesh.dim] + ["d"]
            table = read_table(meas.path, cols)
            loc = np.stack([table[c] for c in cols[:-1]], axis=1)
            try:
                self.setup = build_measurement(mesh, loc, noise_var, table["d"])
            except ValueError as exc:
                raise ConfigError(f"{meas.path}: {exc}") from exc
            self.truth_known = truth.kind != "model"
        self.locations = loc


def build_problem(cfg: ExperimentConfig) -> Problem:
    return Problem(cfg)


def run_infer(cfg: ExperimentConfig) -> dict:
    """Infer the trust and tabulate the parameter posterior; returns ``{file: text}``."""
    p = Problem(cfg)
    psi_star = p.psi_star if p.truth_known else None
    rep = solve_trust(p.setup, p.L, p.G, p.q, cfg.prior, psi_star=psi_star, **cfg.solver.kwargs())
    state = ParameterState(1.0, p.q, BetaPrior(cfg.prior))

    rows = []
    for b in cfg.grid.betas():
        s = state.with_beta(b)
        r = potential_calculus(s, p.setup, p.L, p.G)
        rows.append((b, marginal_neg_log_posterior(s, p.setup, p.L, p.G), r.grad[0],
                     r.hessian[0, 0], r.informativeness_margin))
    grid_csv = _csv_text(["beta", "H", "grad", "hessian", "margin"], rows)

    coords = p.mesh.interior_coordinates
    base = p.G.entries @ p.q
    if rep.diverged:
        # full trust collapses the posterior onto the physics solution
        mean, var = base, np.zeros_like(base)
    else:
        post = centered_posterior(state.with_beta(rep.beta_hat), p.setup, p.L, p.G)
        mean, var = base + post.mean, np.diag(post.covariance)
    names = ["x", "y"][: p.mesh.dim]
    header = names + ["mean", "variance"] + (["truth"] if p.truth_known else [])
    field_rows = []
    for i in range(p.mesh.interior_count):
        row = list(coords[i]) + [mean[i], var[i]]
        if p.truth_known:
            row.append(p.phi_star[i])
        field_rows.append(row)

    metrics = design_metrics(p.mesh, p.locations)
    report = rep.to_dict()
    report.update({
        "n": p.L.n,
        "observations": p.setup.count,
        "noise_sigma": cfg.measurement.noise,
        "fill_distance": metrics.fill_distance,
        "seed": cfg.seed,
    })
    return {
        "trust_report.json": _json_text(report),
        "posterior_grid.csv": grid_csv,
        "fields.csv": _csv_text(header, field_rows),
    }


def run_sweep(cfg: ExperimentConfig) -> dict:
    """Mismatch-scale sweep and nested-design convergence study."""
    p = Problem(cfg)
    if cfg.measurement.design != "uniform":
        raise ConfigError("sweep synthesizes its own data; use design='uniform'")
    sw = model_error_sweep(p.psi0, p.setup, p.L, p.G, p.q, cfg.sweep.scales, cfg.seed,
                           cfg.prior, **cfg.solver.kwargs())
    metrics = design_metrics(p.mesh, p.locations)
    sweep_rows = [(r.scale, p.L.n, metrics.fill_distance, r.beta_hat, r.diverged, r.residual,
                   r.margin, r.verdict, r.limit_beta, r.status) for r in sw.rows]
    conv = convergence_study(p.mesh, p.L, p.G, p.q, p.phi_star, cfg.measurement.noise,
                             cfg.sweep.densities, cfg.seed, prior_kind=cfg.prior)
    conv_rows = [(r.density, r.observations, r.fill_distance, r.separation_radius, r.beta,
                  r.mean_error, r.cov_norm) for r in conv.rows]
    summary = {
        "sweep": {"valid": sw.valid, "monotone": sw.monotone, "ratios": list(sw.ratios),
                  "scaling_ok": sw.scaling_ok()},
        "convergence": {"mean_slope": conv.mean_slope, "cov_slope": conv.cov_slope,
                        "mean_decreasing": conv.mean_decreasing,
                        "cov_decreasing": conv.cov_decreasing},
        "seed": cfg.seed,
    }
    return {
        "sweep.csv": _csv_text(["c", "n", "h_X", "beta_hat", "diverged", "residual", "margin",
                                "verdict", "limit_beta", "status"], sweep_rows),
        "convergence.csv": _csv_text(["density", "observations", "h_X", "q_X", "beta",
                                      "mean_error", "cov_norm"], conv_rows),
        "sweep_summary.json": _json_text(summary),
    }


def run_verify(seed: int = 0, instances: int = 100) -> dict:
    report = run_verification(seed, instances)
    files = {"verify.json": _json_text(report)}
    if report["status"] != "pass":
        failed = sorted(k for k, v in report["checks"].items() if v["status"] != "pass")
        raise VerificationFailed(f"failed checks: {', '.join(failed)}", files)
    return files


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ifttrust", description="Model-trust inference on Poisson problems.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, text in (("infer", "infer the trust for one configuration"),
                       ("sweep", "mismatch-scale sweep and convergence study")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--out", required=True, type=Path)
    sp = sub.add_parser("verify", help="check closed forms against Monte Carlo and finite differences")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--instances", type=int, default=100)
    sp.add_argument("--out", required=True, type=Path)
    return ap


def _fail(code: int, kind: str, exc: BaseException) -> int:
    msg = exc.args[0] if exc.args else str(exc)
    sys.stderr.write(json.dumps({"status": "error", "exit_code": code, "error": kind,
                                 "message": str(msg)}, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "verify":
            if args.seed < 0 or args.instances < 1:
                raise ConfigError("seed must be >= 0 and instances >= 1")
            files = run_verify(args.seed, args.instances)
        else:
            cfg = load_config(args.config)
            files = run_infer(cfg) if args.command == "infer" else run_sweep(cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except VerificationFailed as exc:
        # the report is the product of a failing verify run; keep it
        write_atomic(args.out, exc.args[1])
        return _fail(EXIT_VERIFY, "verification", exc)
    except (TrustSolveError, np.linalg.LinAlgError, ArithmeticError) as exc:
        return _fail(EXIT_SOLVER, "solver", exc)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    try:
        write_atomic(args.out, files)
    except OSError as exc:
        return _fail(EXIT_CONFIG, "io", exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
