"""
Periodic cell problems, effective tensors and contrast tables.

The cell problem for direction i reads -div(a (e_i + grad w_i)) = 0 on the
unit torus with zero-mean w_i.  It is discretised with Q1 elements on an
n x n grid whose opposite faces share degrees of freedom; one dof is pinned
during the solve and the mean is removed afterwards.

The effective tensor uses the convention (grad w)_ij = d w_j / d y_i, so
A*_ij = int a (delta_ij + d w_j / d y_i) dy.

Contrast tables rest on a factorisation: the hydraulic coefficient is a
phase-independent prefactor times k_c or k_a, and the thermal one is
lambda_a times the ratio lambda_c / lambda_a, so each cell problem depends
on one scalar contrast.  Laws whose phase coefficients do not factor this way
would need a cell solve per state instead.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import PchipInterpolator

from .errors import ConfigurationError, ExtrapolationError
from .fem import StructuredGrid, element_stiffness, solve_spd, _scatter
from .materials import MaterialLaws, PhysicalConstants
from .microstructure import CellRaster

TABLE_FORMAT_VERSION = 1
NODES_PER_DECADE = 33


def max_workers() -> int:
    """Worker cap from HYGROHOM_THREADS (default: 1)."""
    try:
        return max(int(os.environ.get("HYGROHOM_THREADS", "1")), 1)
    except ValueError:
        return 1


@dataclass(frozen=True, eq=False)
class CorrectorField:
    """Nodal corrector values on the (n+1)^2 cell grid, one column per direction."""

    grid: StructuredGrid = field(repr=False)
    values: np.ndarray  # (n_nodes, 2)
    coefficient: np.ndarray = field(repr=False)  # per element

    def direction(self, i: int) -> np.ndarray:
        return self.values[:, i - 1]

    def mean(self) -> np.ndarray:
        """Cell average of each component (exact for the Q1 interpolant)."""
        dof, _ = self.grid.periodic_dofs()
        n = self.grid.nx
        interior = np.unique(dof, return_index=True)[1]
        return self.values[interior].sum(axis=0) / n ** 2


def _phase_coefficients(raster: CellRaster, coeff_pair, resolution):
    a_c, a_a = (float(v) for v in coeff_pair)
    if not (a_c > 0.0 and a_a > 0.0):
        raise ConfigurationError(f"phase coefficients must be positive, got ({a_c}, {a_a})")
    chi = raster.element_values(resolution)
    return chi * a_c + (1.0 - chi) * a_a


def _cell_system(grid, coeff):
    dof, n_dofs = grid.periodic_dofs()
    Ke = element_stiffness(grid, coeff)
    K = _scatter(grid, Ke, dof, n_dofs)
    _, dN, w = grid.reference()
    # rhs_i[j] = - sum_e a_e int d N_j / d y_i
    dint = np.einsum("g,gja->ja", w, dN)  # (4 nodes, 2)
    rhs = np.zeros((n_dofs, 2))
    for i in range(2):
        np.add.at(rhs[:, i], dof[grid.conn], -coeff[:, None] * dint[None, :, i])
    return K, rhs, dof, n_dofs


def _solve_periodic(K, rhs, rel_tol):
    """Pin dof 0, solve the reduced SPD system, return the zero-mean solution."""
    n = K.shape[0]
    Kr = K[1:, 1:].tocsr()
    out = np.zeros((n, rhs.shape[1]))
    for i in range(rhs.shape[1]):
        b = rhs[1:, i]
        if np.linalg.norm(b) > 0.0:
            out[1:, i] = solve_spd(Kr, b, rel_tol=rel_tol)
    return out - out.mean(axis=0)


def solve_correctors(raster: CellRaster, coeff_pair, resolution: int, rel_tol: float = 1e-12) -> CorrectorField:
    grid = StructuredGrid(resolution, resolution)
    coeff = _phase_coefficients(raster, coeff_pair, resolution)
    K, rhs, dof, _ = _cell_system(grid, coeff)
    w = _solve_periodic(K, rhs, rel_tol)
    return CorrectorField(grid, w[dof], coeff)


def solve_corrector(raster: CellRaster, coeff_pair, direction: int, resolution: int,
                    rel_tol: float = 1e-12) -> np.ndarray:
    """Nodal corrector w_i for one direction (i in {1, 2})."""
    if direction not in (1, 2):
        raise ValueError("direction must be 1 or 2")
    return solve_correctors(raster, coeff_pair, resolution, rel_tol).direction(direction)


def cell_residual(corr: CorrectorField) -> float:
    """Relative residual of the assembled periodic cell system."""
    K, rhs, dof, n_dofs = _cell_system(corr.grid, corr.coefficient)
    w = np.zeros((n_dofs, 2))
    w[dof] = corr.values
    res = K @ w - rhs
    return float(np.linalg.norm(res) / max(np.linalg.norm(rhs), 1e-300))


def tensor_from_correctors(corr: CorrectorField) -> np.ndarray:
    grid = corr.grid
    grads = grid.element_gradients(corr.values[:, 0]), grid.element_gradients(corr.values[:, 1])
    _, _, w = grid.reference()
    A = np.zeros((2, 2))
    for j in range(2):
        # int_e d w_j / d y_i, per element
        gint = np.einsum("g,ega->ea", w, grads[j])
        for i in range(2):
            A[i, j] = np.sum(corr.coefficient * ((i == j) * grid.element_area + gint[:, i]))
    return A


def effective_tensor(raster: CellRaster, coeff_pair, resolution: int, rel_tol: float = 1e-12) -> np.ndarray:
    """A* = int a (I + grad w) over the unit cell for per-phase scalars (a_c, a_a)."""
    return tensor_from_correctors(solve_correctors(raster, coeff_pair, resolution, rel_tol))


def voigt_reuss_bounds(raster: CellRaster, coeff_pair) -> tuple[float, float]:
    """(harmonic mean, arithmetic mean) of the phase coefficients."""
    a_c, a_a = coeff_pair
    chi = float(np.mean(raster.values))
    return 1.0 / (chi / a_c + (1.0 - chi) / a_a), chi * a_c + (1.0 - chi) * a_a


# --------------------------------------------------------------------------
# contrast tables


def contrast_nodes(c_min: float, c_max: float, per_decade: int = NODES_PER_DECADE) -> np.ndarray:
    """Log-spaced nodes 10^(k/per_decade) covering [c_min, c_max]; 1 is a node."""
    if not 0.0 < c_min <= c_max:
        raise ConfigurationError(f"invalid contrast range [{c_min}, {c_max}]")
    k0 = int(np.floor(per_decade * np.log10(c_min) + 1e-9))
    k1 = int(np.ceil(per_decade * np.log10(c_max) - 1e-9))
    return 10.0 ** (np.arange(k0, k1 + 1) / per_decade)


@dataclass(frozen=True, eq=False)
class ContrastTable:
    """Normalised tensors K^(c) for cement coefficient c and unit aggregate coefficient."""

    raster_hash: str
    resolution: int
    nodes: np.ndarray
    tensors: np.ndarray  # (len(nodes), 2, 2)
    _interp: tuple = field(init=False, repr=False, default=())

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        tensors = np.asarray(self.tensors, dtype=float)
        if nodes.ndim != 1 or tensors.shape != (nodes.size, 2, 2):
            raise ConfigurationError("contrast table nodes and tensors do not match")
        if nodes.size > 1 and np.any(np.diff(nodes) <= 0.0):
            raise ConfigurationError("contrast nodes must be strictly increasing")
        nodes.setflags(write=False)
        tensors.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "tensors", tensors)
        if nodes.size > 1:
            x = np.log(nodes)
            interp = tuple(PchipInterpolator(x, tensors[:, i, j]) for i, j in ((0, 0), (1, 1), (0, 1)))
            object.__setattr__(self, "_interp", interp)

    @property
    def c_min(self) -> float:
        return float(self.nodes[0])

    @property
    def c_max(self) -> float:
        return float(self.nodes[-1])

    def __call__(self, contrast) -> np.ndarray:
        """Interpolated normalised tensor(s), shape (..., 2, 2)."""
        c = np.asarray(contrast, dtype=float)
        tol = 1e-12 * self.c_max
        if np.any(c < self.c_min - tol) or np.any(c > self.c_max + tol):
            raise ExtrapolationError(
                f"contrast outside table range [{self.c_min:g}, {self.c_max:g}]: "
                f"[{np.min(c):g}, {np.max(c):g}]")
        out = np.empty(c.shape + (2, 2))
        if self.nodes.size == 1:
            out[...] = self.tensors[0]
            return out
        x = np.log(np.clip(c, self.c_min, self.c_max))
        k11, k22, k12 = (f(x) for f in self._interp)
        out[..., 0, 0] = k11
        out[..., 1, 1] = k22
        out[..., 0, 1] = k12
        out[..., 1, 0] = k12
        return out

    def to_dict(self) -> dict:
        return {
            "format": "hygrohom-contrast-table",
            "version": TABLE_FORMAT_VERSION,
            "raster_hash": self.raster_hash,
            "resolution": self.resolution,
            "nodes": self.nodes.tolist(),
            "tensors": self.tensors.tolist(),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path, raster: CellRaster | None = None) -> "ContrastTable":
        data = json.loads(Path(path).read_text())
        if data.get("format") != "hygrohom-contrast-table" or data.get("version") != TABLE_FORMAT_VERSION:
            raise ConfigurationError(f"{path} is not a version-{TABLE_FORMAT_VERSION} contrast table")
        if raster is not None and data["raster_hash"] != raster.digest():
            raise ConfigurationError(f"{path} was built for a different raster")
        return cls(data["raster_hash"], int(data["resolution"]), np.array(data["nodes"]),
                   np.array(data["tensors"]))

    def to_csv(self, path) -> None:
        lines = ["contrast,k11,k12,k21,k22"]
        for c, K in zip(self.nodes, self.tensors):
            lines.append(",".join(format(v, ".17g") for v in (c, K[0, 0], K[0, 1], K[1, 0], K[1, 1])))
        Path(path).write_text("\n".join(lines) + "\n")


def build_contrast_table(raster: CellRaster, contrast_grid, resolution: int,
                         required_range: tuple[float, float] | None = None,
                         rel_tol: float = 1e-12) -> ContrastTable:
    """Solve the cell problem at every contrast node (cement c, aggregate 1).

    ``required_range`` is the contrast interval the table must cover, e.g.
    [k1/k_a, k2/k_a]; a grid that does not cover it is refused.
    """
    nodes = np.atleast_1d(np.asarray(contrast_grid, dtype=float))
    if np.any(nodes <= 0.0):
        raise ConfigurationError("contrast nodes must be positive")
    if required_range is not None:
        lo, hi = required_range
        if nodes.min() > lo * (1 + 1e-12) or nodes.max() < hi * (1 - 1e-12):
            raise ConfigurationError(
                f"contrast grid [{nodes.min():g}, {nodes.max():g}] does not cover the admissible "
                f"range [{lo:g}, {hi:g}]")
    with ThreadPoolExecutor(max_workers=max_workers()) as pool:
        tensors = list(pool.map(lambda c: effective_tensor(raster, (c, 1.0), resolution, rel_tol), nodes))
    return ContrastTable(raster.digest(), resolution, nodes, np.array(tensors))


def hydraulic_contrast_range(laws: MaterialLaws) -> tuple[float, float]:
    b = laws.bounds
    return b.k1 / laws.k_a, b.k2 / laws.k_a


def thermal_contrast_range(laws: MaterialLaws) -> tuple[float, float]:
    """Crude but safe bracket of lambda_c / lambda_a from the declared bounds."""
    b = laws.bounds
    return b.lam1 / b.lam2, b.lam2 / b.lam1


def build_tables(raster: CellRaster, laws: MaterialLaws, resolution: int,
                 per_decade: int = NODES_PER_DECADE) -> tuple[ContrastTable, ContrastTable]:
    """Hydraulic and thermal tables covering the contrast ranges allowed by the bounds."""
    hyd = hydraulic_contrast_range(laws)
    thm = thermal_contrast_range(laws)
    t_a = build_contrast_table(raster, contrast_nodes(*hyd, per_decade), resolution, hyd)
    t_l = build_contrast_table(raster, contrast_nodes(*thm, per_decade), resolution, thm)
    return t_a, t_l


# --------------------------------------------------------------------------
# homogenised coefficients


def query_effective_A(table: ContrastTable, laws: MaterialLaws, constants: PhysicalConstants, p, theta, r):
    """A* = rho_w k_R(S(p)) / mu(theta) * k_a * K^(k_c(r) / k_a); shape (..., 2, 2)."""
    scale = constants.rho_w * laws.k_rel(laws.saturation(p)) / laws.mu(theta) * laws.k_a
    K = table(laws.k_c(r) / laws.k_a)
    return np.asarray(scale)[..., None, None] * K


def query_effective_Lambda(table: ContrastTable, laws: MaterialLaws, p, theta, r):
    """Lambda* = lambda_a(p, theta) * L^(lambda_c / lambda_a); shape (..., 2, 2)."""
    la = laws.lambda_a(p, theta)
    L = table(laws.lambda_c(p, theta, r) / la)
    return np.asarray(la)[..., None, None] * L


def effective_b(chi_c_star: float, laws: MaterialLaws, constants: PhysicalConstants, p, r):
    return constants.rho_w * (chi_c_star * laws.phi_c(r) + (1.0 - chi_c_star) * laws.phi_a) * laws.saturation(p)


def effective_sigma(chi_c_star: float, laws: MaterialLaws, constants: PhysicalConstants, r):
    cem = constants.rho_sc * constants.c_sc * (1.0 - laws.phi_c(r))
    agg = constants.rho_sa * constants.c_sa * (1.0 - laws.phi_a)
    return chi_c_star * cem + (1.0 - chi_c_star) * agg


def corrector_reconstruction(corr: CorrectorField, grad_x, epsilon: float, points):
    """First-order corrector eps * grad_x u . w(x / eps) at physical points.

    ``grad_x`` has shape (n_points, 2); w is evaluated by bilinear
    interpolation on the periodic cell grid.
    """
    pts = np.mod(np.asarray(points, dtype=float) / epsilon, 1.0)
    n = corr.grid.nx
    s = pts * n
    i0 = np.minimum(s.astype(int), n - 1)
    t = s - i0
    out = np.zeros(len(pts))
    for d in range(2):
        w = corr.values[:, d]
        val = 0.0
        for dx, dy, wt in ((0, 0, (1 - t[:, 0]) * (1 - t[:, 1])), (1, 0, t[:, 0] * (1 - t[:, 1])),
                           (1, 1, t[:, 0] * t[:, 1]), (0, 1, (1 - t[:, 0]) * t[:, 1])):
            val = val + wt * w[corr.grid.node(i0[:, 0] + dx, i0[:, 1] + dy)]
        out += np.asarray(grad_x)[:, d] * val
    return epsilon * out
