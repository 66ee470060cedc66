"""Experiment configuration: strict TOML schema and CSV ingestion.

Every section is validated before any computation runs. Unknown keys are
rejected so a typo never silently falls back to a default. Relative paths
are resolved against the directory of the config file.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .mesh import Mesh, build_mesh

__all__ = [
    "ConfigError",
    "SourceSpec",
    "TruthSpec",
    "MeasurementSpec",
    "SolverSpec",
    "GridSpec",
    "SweepSpec",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "read_table",
    "read_nodal_values",
]


class ConfigError(ValueError):
    """Invalid configuration or malformed input file."""


SOURCE_KINDS = ("constant", "sine", "bump", "parabola", "csv")

_TOP_KEYS = {"seed", "prior", "mesh", "source", "truth", "measurement", "solver", "grid", "sweep"}
_SECTION_KEYS = {
    "mesh": {"dim", "extent", "nodes"},
    "source": {"kind", "value", "amplitude", "modes", "center", "width", "path"},
    "truth": {"kind", "scale", "perturbation", "path"},
    "measurement": {"design", "density", "noise", "path"},
    "solver": {"damping", "tol", "max_iter", "beta0"},
    "grid": {"beta_min", "beta_max", "points"},
    "sweep": {"scales", "densities"},
}


def _check_keys(table, allowed, where):
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    extra = sorted(set(table) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(extra)}")


def _number(table, key, where, default=None, positive=False):
    v = table.get(key, default)
    if v is None:
        raise ConfigError(f"[{where}] missing required key {key!r}")
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"[{where}] {key} must be a number, got {v!r}")
    v = float(v)
    if not math.isfinite(v):
        raise ConfigError(f"[{where}] {key} must be finite")
    if positive and v <= 0:
        raise ConfigError(f"[{where}] {key} must be positive, got {v!r}")
    return v


def _integer(table, key, where, default=None, minimum=None):
    v = table.get(key, default)
    if v is None:
        raise ConfigError(f"[{where}] missing required key {key!r}")
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"[{where}] {key} must be an integer, got {v!r}")
    if minimum is not None and v < minimum:
        raise ConfigError(f"[{where}] {key} must be >= {minimum}, got {v}")
    return v


def _path(table, key, where, base: Path) -> Path:
    v = table.get(key)
    if not isinstance(v, str) or not v:
        raise ConfigError(f"[{where}] {key} must be a file path")
    p = Path(v)
    return p if p.is_absolute() else base / p


def read_table(path: Path, columns) -> dict:
    """Read a comma-separated file with a mandatory header.

    ``columns`` lists the required column names in order; every value must
    parse as a finite float. Returns one float array per column.
    """
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise ConfigError(f"{path}: empty file")
    header = [c.strip() for c in rows[0]]
    if header != list(columns):
        raise ConfigError(f"{path}: expected header {','.join(columns)}, got {','.join(header)}")
    body = rows[1:]
    if not body:
        raise ConfigError(f"{path}: no data rows")
    values = np.empty((len(body), len(columns)))
    for i, r in enumerate(body, start=2):
        if len(r) != len(columns):
            raise ConfigError(f"{path}:{i}: expected {len(columns)} fields, got {len(r)}")
        try:
            values[i - 2] = [float(c) for c in r]
        except ValueError as exc:
            raise ConfigError(f"{path}:{i}: {exc}") from exc
    if not np.all(np.isfinite(values)):
        raise ConfigError(f"{path}: non-finite value")
    return {name: values[:, j] for j, name in enumerate(columns)}


def _coord_names(dim):
    return ["x", "y"][:dim]


def read_nodal_values(mesh: Mesh, path: Path, name: str) -> np.ndarray:
    """Column ``name`` of a CSV listing the interior nodes in mesh order."""
    cols = _coord_names(mesh.dim) + [name]
    table = read_table(path, cols)
    coords = np.stack([table[c] for c in cols[:-1]], axis=1)
    expected = mesh.interior_coordinates
    if coords.shape != expected.shape or not np.allclose(coords, expected, rtol=0, atol=1e-9):
        raise ConfigError(f"{path}: rows must list the {mesh.interior_count} interior nodes in mesh order")
    return table[name]


@dataclass(frozen=True)
class SourceSpec:
    """Analytic or tabulated source term."""

    kind: str
    value: float = 0.0
    amplitude: float = 1.0
    modes: tuple = (1,)
    center: tuple = ()
    width: float = 0.1
    path: Optional[Path] = None

    def evaluate(self, mesh: Mesh) -> np.ndarray:
        x = mesh.interior_coordinates
        lo = np.array([e[0] for e in mesh.extent])
        span = np.array([e[1] - e[0] for e in mesh.extent])
        u = (x - lo) / span
        if self.kind == "constant":
            return np.full(mesh.interior_count, self.value)
        if self.kind == "sine":
            modes = np.broadcast_to(np.asarray(self.modes, dtype=float), (mesh.dim,))
            return self.amplitude * np.prod(np.sin(np.pi * modes * u), axis=1)
        if self.kind == "parabola":
            return self.amplitude * np.prod(4.0 * u * (1.0 - u), axis=1)
        if self.kind == "bump":
            c = np.broadcast_to(np.asarray(self.center, dtype=float), (mesh.dim,))
            r2 = np.sum((x - c) ** 2, axis=1)
            return self.amplitude * np.exp(-r2 / self.width**2)
        return read_nodal_values(mesh, self.path, "q")


def _parse_source(table, where, base: Path, dim: int) -> SourceSpec:
    _check_keys(table, _SECTION_KEYS["source"], where)
    kind = table.get("kind")
    if kind not in SOURCE_KINDS:
        raise ConfigError(f"[{where}] kind must be one of {', '.join(SOURCE_KINDS)}, got {kind!r}")
    used = {"constant": {"value"}, "sine": {"amplitude", "modes"}, "parabola": {"amplitude"},
            "bump": {"amplitude", "center", "width"}, "csv": {"path"}}[kind]
    stray = sorted(set(table) - used - {"kind"})
    if stray:
        raise ConfigError(f"[{where}] key(s) {', '.join(stray)} do not apply to kind={kind!r}")
    if kind == "constant":
        return SourceSpec(kind, value=_number(table, "value", where))
    if kind == "csv":
        return SourceSpec(kind, path=_path(table, "path", where, base))
    amp = _number(table, "amplitude", where, default=1.0)
    if kind == "sine":
        modes = table.get("modes", 1)
        modes = [modes] if isinstance(modes, int) and not isinstance(modes, bool) else modes
        if (not isinstance(modes, list) or len(modes) not in (1, dim)
                or any(isinstance(m, bool) or not isinstance(m, int) or m < 1 for m in modes)):
            raise ConfigError(f"[{where}] modes must be a positive integer or one per axis")
        return SourceSpec(kind, amplitude=amp, modes=tuple(modes))
    if kind == "parabola":
        return SourceSpec(kind, amplitude=amp)
    center = table.get("center")
    if isinstance(center, (int, float)) and not isinstance(center, bool):
        center = [center]
    if (not isinstance(center, list) or len(center) != dim
            or any(isinstance(c, bool) or not isinstance(c, (int, float)) for c in center)):
        raise ConfigError(f"[{where}] center must give one coordinate per axis")
    width = _number(table, "width", where, default=0.1, positive=True)
    return SourceSpec(kind, amplitude=amp, center=tuple(float(c) for c in center), width=width)


@dataclass(frozen=True)
class TruthSpec:
    """Ground truth behind synthetic data.

    ``model``: the physics solution ``G q`` (correct model).
    ``perturbed``: ``G (q + scale * dq)`` for a source perturbation ``dq``.
    ``csv``: a tabulated field.
    """

    kind: str = "model"
    scale: float = 1.0
    perturbation: Optional[SourceSpec] = None
    path: Optional[Path] = None


@dataclass(frozen=True)
class MeasurementSpec:
    design: str = "uniform"
    density: int = 64
    noise: float = 1e-3
    path: Optional[Path] = None


@dataclass(frozen=True)
class SolverSpec:
    damping: float = 0.5
    tol: float = 1e-10
    max_iter: int = 200
    beta0: float = 1.0

    def kwargs(self) -> dict:
        return {"damping": self.damping, "tol": self.tol, "max_iter": self.max_iter, "beta0": self.beta0}


@dataclass(frozen=True)
class GridSpec:
    beta_min: float = 1e-3
    beta_max: float = 1e3
    points: int = 101

    def betas(self) -> np.ndarray:
        return np.geomspace(self.beta_min, self.beta_max, self.points)


@dataclass(frozen=True)
class SweepSpec:
    scales: tuple = (1.0, 0.5, 0.25, 0.125)
    densities: tuple = (8, 16, 32, 64)


@dataclass(frozen=True)
class ExperimentConfig:
    mesh: Mesh
    source: SourceSpec
    truth: TruthSpec = field(default_factory=TruthSpec)
    measurement: MeasurementSpec = field(default_factory=MeasurementSpec)
    solver: SolverSpec = field(default_factory=SolverSpec)
    grid: GridSpec = field(default_factory=GridSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    prior: str = "flat"
    seed: int = 0


def _parse_mesh(table) -> Mesh:
    _check_keys(table, _SECTION_KEYS["mesh"], "mesh")
    dim = _integer(table, "dim", "mesh")
    extent = table.get("extent", [0.0, 1.0])
    nodes = table.get("nodes")
    if nodes is None:
        raise ConfigError("[mesh] missing required key 'nodes'")
    try:
        return build_mesh(dim, extent, nodes)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[mesh] {exc}") from exc


def _parse_truth(table, base, dim) -> TruthSpec:
    _check_keys(table, _SECTION_KEYS["truth"], "truth")
    kind = table.get("kind", "model")
    if kind == "model":
        if set(table) - {"kind"}:
            raise ConfigError("[truth] kind='model' takes no further keys")
        return TruthSpec("model")
    if kind == "perturbed":
        if "path" in table:
            raise ConfigError("[truth] path does not apply to kind='perturbed'")
        if "perturbation" not in table:
            raise ConfigError("[truth] kind='perturbed' needs a [truth.perturbation] table")
        scale = _number(table, "scale", "truth", default=1.0)
        return TruthSpec("perturbed", scale,
                         _parse_source(table["perturbation"], "truth.perturbation", base, dim))
    if kind == "csv":
        stray = sorted(set(table) - {"kind", "path"})
        if stray:
            raise ConfigError(f"[truth] key(s) {', '.join(stray)} do not apply to kind='csv'")
        return TruthSpec("csv", path=_path(table, "path", "truth", base))
    raise ConfigError(f"[truth] kind must be model, perturbed or csv, got {kind!r}")


def _parse_measurement(table, base) -> MeasurementSpec:
    _check_keys(table, _SECTION_KEYS["measurement"], "measurement")
    design = table.get("design", "uniform")
    noise = _number(table, "noise", "measurement", default=1e-3, positive=True)
    if design == "uniform":
        if "path" in table:
            raise ConfigError("[measurement] path does not apply to design='uniform'")
        return MeasurementSpec("uniform", _integer(table, "density", "measurement", 64, minimum=2), noise)
    if design == "csv":
        if "density" in table:
            raise ConfigError("[measurement] density does not apply to design='csv'")
        return MeasurementSpec("csv", 0, noise, _path(table, "path", "measurement", base))
    raise ConfigError(f"[measurement] design must be uniform or csv, got {design!r}")


def _parse_solver(table) -> SolverSpec:
    _check_keys(table, _SECTION_KEYS["solver"], "solver")
    spec = SolverSpec(
        _number(table, "damping", "solver", 0.5, positive=True),
        _number(table, "tol", "solver", 1e-10, positive=True),
        _integer(table, "max_iter", "solver", 200, minimum=1),
        _number(table, "beta0", "solver", 1.0, positive=True),
    )
    if spec.damping > 1:
        raise ConfigError("[solver] damping must be in (0, 1]")
    return spec


def _parse_grid(table) -> GridSpec:
    _check_keys(table, _SECTION_KEYS["grid"], "grid")
    spec = GridSpec(
        _number(table, "beta_min", "grid", 1e-3, positive=True),
        _number(table, "beta_max", "grid", 1e3, positive=True),
        _integer(table, "points", "grid", 101, minimum=3),
    )
    if spec.beta_max <= spec.beta_min:
        raise ConfigError("[grid] beta_max must exceed beta_min")
    return spec


def _parse_sweep(table) -> SweepSpec:
    _check_keys(table, _SECTION_KEYS["sweep"], "sweep")
    scales = table.get("scales", [1.0, 0.5, 0.25, 0.125])
    densities = table.get("densities", [8, 16, 32, 64])
    if (not isinstance(scales, list) or not scales
            or any(isinstance(c, bool) or not isinstance(c, (int, float)) or not c > 0 for c in scales)):
        raise ConfigError("[sweep] scales must be a non-empty list of positive numbers")
    if not isinstance(densities, list) or not densities:
        raise ConfigError("[sweep] densities must be a non-empty list")
    if any(isinstance(k, bool) or not isinstance(k, int) or k < 2 for k in densities):
        raise ConfigError("[sweep] densities must be integers >= 2")
    for a, b in zip(densities, densities[1:]):
        if b <= a or b % a:
            raise ConfigError(f"[sweep] densities must be nested (each divides the next): {a} -> {b}")
    return SweepSpec(tuple(float(c) for c in scales), tuple(densities))


def parse_config(raw: dict, base: Path = Path(".")) -> ExperimentConfig:
    """Validate a parsed TOML document into an :class:`ExperimentConfig`."""
    _check_keys(raw, _TOP_KEYS, "top level")
    seed = _integer(raw, "seed", "top level", 0, minimum=0)
    prior = raw.get("prior", "flat")
    if prior not in ("flat", "jeffreys"):
        raise ConfigError(f"prior must be 'flat' or 'jeffreys', got {prior!r}")
    for key in ("mesh", "source"):
        if key not in raw:
            raise ConfigError(f"missing required section [{key}]")
    mesh = _parse_mesh(raw["mesh"])
    if prior == "jeffreys" and mesh.interior_count <= 2:
        raise ConfigError(
            f"Jeffreys prior needs more than 2 interior nodes, mesh has {mesh.interior_count}"
        )
    return ExperimentConfig(
        mesh=mesh,
        source=_parse_source(raw["source"], "source", base, mesh.dim),
        truth=_parse_truth(raw.get("truth", {"kind": "model"}), base, mesh.dim),
        measurement=_parse_measurement(raw.get("measurement", {}), base),
        solver=_parse_solver(raw.get("solver", {})),
        grid=_parse_grid(raw.get("grid", {})),
        sweep=_parse_sweep(raw.get("sweep", {})),
        prior=prior,
        seed=seed,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(raw, path.parent)
