"""Finite-difference discretization of the Dirichlet Poisson problem.

Fields live on the interior nodes of a uniform rectangular grid; boundary
nodes are pinned to zero and eliminated. Vectors over interior nodes are
paired with the quadrature weights ``w_i = h**dim`` so that
``phi @ (w * psi)`` approximates the L2(Omega) inner product.

Interior nodes are ordered in C order over the axes (the last axis varies
fastest), i.e. ``index = ix * ny + iy`` in two dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "Mesh",
    "OperatorMatrix",
    "MeasurementSetup",
    "DesignMetrics",
    "NonInvertibleOperatorError",
    "build_mesh",
    "build_laplacian",
    "green_operator",
    "dirichlet_energy",
    "build_measurement",
    "design_metrics",
    "uniform_design",
]


class NonInvertibleOperatorError(np.linalg.LinAlgError):
    """Raised when an operator that must be SPD is singular or indefinite."""

    def __init__(self, smallest_eigenvalue: float):
        self.smallest_eigenvalue = float(smallest_eigenvalue)
        super().__init__(
            f"operator is not positive definite "
            f"(smallest eigenvalue {self.smallest_eigenvalue:.3e})"
        )


@dataclass(frozen=True)
class Mesh:
    """Uniform tensor-product grid on a box, boundary nodes included.

    Parameters
    ----------
    dim : int
        Spatial dimension, 1 or 2.
    extent : tuple of (lo, hi) pairs
        Interval bounds per axis.
    nodes_per_axis : tuple of int
        Node counts per axis, boundary nodes included.
    """

    dim: int
    extent: tuple
    nodes_per_axis: tuple

    @property
    def spacing(self) -> np.ndarray:
        return np.array(
            [(hi - lo) / (m - 1) for (lo, hi), m in zip(self.extent, self.nodes_per_axis)]
        )

    @property
    def interior_shape(self) -> tuple:
        return tuple(m - 2 for m in self.nodes_per_axis)

    @property
    def interior_count(self) -> int:
        return int(np.prod(self.interior_shape))

    @property
    def volume(self) -> float:
        return float(np.prod([hi - lo for lo, hi in self.extent]))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axis_nodes(self, axis: int) -> np.ndarray:
        """All node coordinates along ``axis``, boundary included."""
        lo, _ = self.extent[axis]
        h = self.spacing[axis]
        return lo + h * np.arange(self.nodes_per_axis[axis], dtype=float)

    def interior_axis_nodes(self, axis: int) -> np.ndarray:
        return self.axis_nodes(axis)[1:-1]

    @property
    def interior_coordinates(self) -> np.ndarray:
        """Interior node coordinates, shape ``(n, dim)``."""
        axes = [self.interior_axis_nodes(a) for a in range(self.dim)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    @property
    def weights(self) -> np.ndarray:
        """Quadrature weights of the interior nodes."""
        return np.full(self.interior_count, self.cell_volume)

    @property
    def node_weights(self) -> np.ndarray:
        """Trapezoidal weights over the full grid (sum to the domain volume)."""
        w = np.ones(())
        for a in range(self.dim):
            wa = np.full(self.nodes_per_axis[a], self.spacing[a])
            wa[0] = wa[-1] = 0.5 * self.spacing[a]
            w = np.multiply.outer(w, wa)
        return w.ravel()

    def inner(self, phi, psi) -> float:
        """Discrete L2 pairing of two interior-node vectors."""
        return float(np.dot(np.asarray(phi) * self.weights, np.asarray(psi)))

    def evaluate(self, func) -> np.ndarray:
        """Sample ``func(*coords)`` at the interior nodes."""
        x = self.interior_coordinates
        return np.asarray(func(*x.T), dtype=float).reshape(self.interior_count)


@dataclass(frozen=True)
class OperatorMatrix:
    """Dense matrix of a linear operator on interior-node coefficients.

    ``weights`` are the quadrature weights of the coefficient space, so the
    bilinear form ``psi^dagger A phi`` is ``psi @ (weights * (A @ phi))``.
    """

    entries: np.ndarray
    weights: np.ndarray
    symmetric: bool = True

    def __post_init__(self):
        a = np.asarray(self.entries, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if a.ndim != 2:
            raise ValueError("operator entries must be a 2-D array")
        if w.shape != (a.shape[0],):
            raise ValueError(f"weights shape {w.shape} does not match {a.shape[0]} rows")
        if np.any(w <= 0):
            raise ValueError("quadrature weights must be strictly positive")
        if self.symmetric:
            scale = max(np.max(np.abs(a), initial=0.0), np.finfo(float).tiny)
            if a.shape[0] != a.shape[1] or np.max(np.abs(a - a.T), initial=0.0) > 1e-12 * scale:
                raise ValueError("operator flagged symmetric but entries are not")
        a.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "entries", a)
        object.__setattr__(self, "weights", w)

    @property
    def shape(self) -> tuple:
        return self.entries.shape

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def form(self) -> np.ndarray:
        """Matrix of the weighted bilinear form, ``diag(w) @ A``."""
        return self.weights[:, None] * self.entries

    def __matmul__(self, other):
        return self.entries @ other


@dataclass(frozen=True)
class MeasurementSetup:
    """Point measurements ``d = R phi + noise`` with ``noise ~ N(0, sigma^2 I)``."""

    locations: np.ndarray
    R: np.ndarray
    noise_variance: float
    data: Optional[np.ndarray] = None

    @property
    def count(self) -> int:
        return self.R.shape[0]

    @property
    def Gamma(self) -> np.ndarray:
        return self.noise_variance * np.eye(self.count)

    def with_data(self, data) -> "MeasurementSetup":
        d = np.asarray(data, dtype=float).reshape(-1)
        if d.shape[0] != self.count:
            raise ValueError(f"expected {self.count} data values, got {d.shape[0]}")
        return MeasurementSetup(self.locations, self.R, self.noise_variance, d)

    def subset(self, rows) -> "MeasurementSetup":
        rows = np.asarray(rows, dtype=int)
        data = None if self.data is None else self.data[rows]
        return MeasurementSetup(self.locations[rows], self.R[rows], self.noise_variance, data)


@dataclass(frozen=True)
class DesignMetrics:
    fill_distance: float
    separation_radius: Optional[float]
    mesh_ratio: Optional[float]
    probe_points: int = field(default=0, compare=False)


def build_mesh(dim: int, extent, nodes_per_axis) -> Mesh:
    """Build a uniform mesh.

    ``extent`` is ``[lo, hi]`` (1-D) or a sequence of such pairs;
    ``nodes_per_axis`` is an int (same on every axis) or a sequence.
    """
    if dim not in (1, 2):
        raise ValueError(f"dim must be 1 or 2, got {dim!r}")
    ext = np.asarray(extent, dtype=float)
    if ext.shape == (2,):
        ext = np.tile(ext, (dim, 1))
    if ext.shape != (dim, 2):
        raise ValueError(f"extent must give (lo, hi) for each of {dim} axes")
    if not np.all(np.isfinite(ext)) or np.any(ext[:, 1] <= ext[:, 0]):
        raise ValueError("extent must have positive length on every axis")
    if np.ndim(nodes_per_axis) == 0:
        counts = (int(nodes_per_axis),) * dim
    else:
        counts = tuple(int(m) for m in nodes_per_axis)
    if len(counts) != dim:
        raise ValueError("nodes_per_axis length must equal dim")
    if min(counts) < 3:
        raise ValueError("need at least 3 nodes per axis (one interior node)")
    return Mesh(dim, tuple((float(lo), float(hi)) for lo, hi in ext), counts)


def _second_difference(m: int, h: float) -> np.ndarray:
    return (2.0 * np.eye(m) - np.eye(m, k=1) - np.eye(m, k=-1)) / h**2


def build_laplacian(mesh: Mesh) -> OperatorMatrix:
    """Negative Laplacian with homogeneous Dirichlet rows eliminated.

    3-point stencil in 1-D, 5-point in 2-D. The result is SPD.
    """
    shape = mesh.interior_shape
    h = mesh.spacing
    if mesh.dim == 1:
        entries = _second_difference(shape[0], h[0])
    else:
        mx, my = shape
        entries = np.kron(_second_difference(mx, h[0]), np.eye(my)) + np.kron(
            np.eye(mx), _second_difference(my, h[1])
        )
    return OperatorMatrix(entries, mesh.weights, symmetric=True)


def green_operator(L: OperatorMatrix) -> OperatorMatrix:
    """Inverse of an SPD operator, ``G = L^{-1}``."""
    evals = np.linalg.eigvalsh(L.entries)
    if evals[0] <= 0.0:
        raise NonInvertibleOperatorError(evals[0])
    G = np.linalg.solve(L.entries, np.eye(L.n))
    G = 0.5 * (G + G.T)
    return OperatorMatrix(G, L.weights, symmetric=True)


def dirichlet_energy(L: OperatorMatrix, q_field, phi) -> float:
    """``E(phi) = 1/2 phi^dagger L phi - q^dagger phi``; minimized by ``phi = G q``."""
    q = np.asarray(q_field, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if q.shape != (L.n,) or phi.shape != (L.n,):
        raise ValueError(
            f"dimension mismatch: operator is {L.n}, q is {q.shape}, phi is {phi.shape}"
        )
    wphi = L.weights * phi
    return float(0.5 * wphi @ (L.entries @ phi) - q @ wphi)


def _interp_weights_1d(x: float, nodes: np.ndarray):
    """Indices (into ``nodes``) and weights of linear interpolation at ``x``."""
    h = nodes[1] - nodes[0]
    s = (x - nodes[0]) / h
    i = min(int(math.floor(s)), len(nodes) - 2)
    t = s - i
    return (i, i + 1), (1.0 - t, t)


def build_measurement(mesh: Mesh, locations, noise_variance: float, data=None) -> MeasurementSetup:
    """Interpolating point-measurement operator.

    Rows of ``R`` hold linear (1-D) or bilinear (2-D) interpolation weights
    from interior-node coefficients to each location. Boundary nodes carry
    the Dirichlet value 0, so their weights are dropped.
    """
    if not noise_variance > 0:
        raise ValueError("noise_variance must be positive")
    loc = np.asarray(locations, dtype=float)
    if loc.ndim == 1 and mesh.dim == 1:
        loc = loc[:, None]
    if loc.ndim != 2 or loc.shape[1] != mesh.dim:
        raise ValueError(f"locations must have shape (k, {mesh.dim})")
    for a, (lo, hi) in enumerate(mesh.extent):
        if np.any(loc[:, a] <= lo) or np.any(loc[:, a] >= hi):
            raise ValueError("measurement locations must lie strictly inside the domain")
    k = loc.shape[0]
    R = np.zeros((k, mesh.interior_count))
    axes = [mesh.axis_nodes(a) for a in range(mesh.dim)]
    inner = mesh.interior_shape
    for row, x in enumerate(loc):
        stencils = [_interp_weights_1d(x[a], axes[a]) for a in range(mesh.dim)]
        if mesh.dim == 1:
            (i0, i1), (w0, w1) = stencils[0]
            for i, w in ((i0, w0), (i1, w1)):
                if 1 <= i <= inner[0] and w != 0.0:
                    R[row, i - 1] += w
        else:
            (ix0, ix1), (wx0, wx1) = stencils[0]
            (iy0, iy1), (wy0, wy1) = stencils[1]
            for ix, wx in ((ix0, wx0), (ix1, wx1)):
                for iy, wy in ((iy0, wy0), (iy1, wy1)):
                    w = wx * wy
                    if 1 <= ix <= inner[0] and 1 <= iy <= inner[1] and w != 0.0:
                        R[row, (ix - 1) * inner[1] + (iy - 1)] += w
    setup = MeasurementSetup(loc, R, float(noise_variance))
    if data is not None:
        setup = setup.with_data(data)
    return setup


def uniform_design(mesh: Mesh, density: int) -> np.ndarray:
    """Interior points of a uniform grid with ``density`` intervals per axis.

    Designs are nested whenever one density divides the next.
    """
    density = int(density)
    if density < 2:
        raise ValueError("design density must be at least 2")
    axes = [
        lo + (hi - lo) * np.arange(1, density) / density for lo, hi in mesh.extent
    ]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def _probe_grid(mesh: Mesh, intervals: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, intervals + 1) for lo, hi in mesh.extent]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def design_metrics(mesh: Mesh, locations, refinement: int = 8) -> DesignMetrics:
    """Fill distance, separation radius and mesh ratio of a design.

    The fill distance is the largest distance from a probe point to its
    nearest location. The probe grid has ``refinement`` times more intervals
    per axis than the coarser of the mesh and the design; in 1-D the gap
    midpoints are added, which makes the value exact.
    """
    loc = np.asarray(locations, dtype=float)
    if loc.ndim == 1:
        loc = loc[:, None]
    if loc.shape[0] < 1:
        raise ValueError("need at least one location")
    k = loc.shape[0]
    per_axis = max(max(mesh.nodes_per_axis) - 1, int(math.ceil(k ** (1.0 / mesh.dim))))
    probes = _probe_grid(mesh, refinement * per_axis)
    if mesh.dim == 1:
        xs = np.sort(loc[:, 0])
        probes = np.concatenate([probes, (0.5 * (xs[1:] + xs[:-1]))[:, None]])
    tree = cKDTree(loc)
    dist, _ = tree.query(probes)
    fill = float(dist.max())
    if k < 2:
        return DesignMetrics(fill, None, None, probes.shape[0])
    nn, _ = tree.query(loc, k=2)
    sep = 0.5 * float(nn[:, 1].min())
    ratio = fill / sep if sep > 0 else math.inf
    return DesignMetrics(fill, sep, ratio, probes.shape[0])
