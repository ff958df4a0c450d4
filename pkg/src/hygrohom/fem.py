"""
Q1 finite elements on uniform rectangular grids.

Node ``k = iy * (nx + 1) + ix`` sits at ``(ix * hx, iy * hy)``; element
``e = ey * nx + ex`` has local nodes (0,0), (1,0), (1,1), (0,1) in
counter-clockwise order.  All element integrals use the exact 2x2 Gauss rule.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import AssemblyError, SolverError

_G = 0.5 - 0.5 / np.sqrt(3.0)
GAUSS_REF = np.array([[_G, _G], [1 - _G, _G], [1 - _G, 1 - _G], [_G, 1 - _G]])  # on [0,1]^2
GAUSS_W = np.full(4, 0.25)
LOCAL = np.array([[0, 0], [1, 0], [1, 1], [0, 1]])

SIDES = ("bottom", "right", "top", "left")


def _shape(xi, eta):
    """Bilinear shape values and reference gradients at (xi, eta) in [0,1]^2."""
    sx = np.where(LOCAL[:, 0] == 1, xi, 1 - xi)
    sy = np.where(LOCAL[:, 1] == 1, eta, 1 - eta)
    dsx = np.where(LOCAL[:, 0] == 1, 1.0, -1.0)
    dsy = np.where(LOCAL[:, 1] == 1, 1.0, -1.0)
    return sx * sy, np.stack([dsx * sy, sx * dsy], axis=1)


@dataclass(frozen=True, eq=False)
class StructuredGrid:
    nx: int
    ny: int
    lx: float = 1.0
    ly: float = 1.0
    # derived
    conn: np.ndarray = field(init=False, repr=False)
    boundary_edges: np.ndarray = field(init=False, repr=False)
    edge_sides: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid needs at least one element per side")
        ex, ey = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="xy")
        ex, ey = ex.ravel(), ey.ravel()
        conn = np.stack([self.node(ex + dx, ey + dy) for dx, dy in LOCAL], axis=1)
        object.__setattr__(self, "conn", conn)
        edges, sides = [], []
        ix = np.arange(self.nx)
        iy = np.arange(self.ny)
        for side, a, b in (
            ("bottom", self.node(ix, 0), self.node(ix + 1, 0)),
            ("right", self.node(self.nx, iy), self.node(self.nx, iy + 1)),
            ("top", self.node(ix + 1, self.ny), self.node(ix, self.ny)),
            ("left", self.node(0, iy + 1), self.node(0, iy)),
        ):
            edges.append(np.stack([a, b], axis=1))
            sides += [side] * len(a)
        object.__setattr__(self, "boundary_edges", np.concatenate(edges))
        object.__setattr__(self, "edge_sides", np.array(sides))

    @property
    def hx(self) -> float:
        return self.lx / self.nx

    @property
    def hy(self) -> float:
        return self.ly / self.ny

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_elements(self) -> int:
        return self.nx * self.ny

    @property
    def element_area(self) -> float:
        return self.hx * self.hy

    def node(self, ix, iy):
        return np.asarray(iy) * (self.nx + 1) + np.asarray(ix)

    def coordinates(self) -> np.ndarray:
        """Node coordinates, shape (n_nodes, 2)."""
        x = np.arange(self.nx + 1) * self.hx
        y = np.arange(self.ny + 1) * self.hy
        X, Y = np.meshgrid(x, y, indexing="xy")
        return np.stack([X.ravel(), Y.ravel()], axis=1)

    def centroids(self) -> np.ndarray:
        x = (np.arange(self.nx) + 0.5) * self.hx
        y = (np.arange(self.ny) + 0.5) * self.hy
        X, Y = np.meshgrid(x, y, indexing="xy")
        return np.stack([X.ravel(), Y.ravel()], axis=1)

    def edge_lengths(self) -> np.ndarray:
        return np.where(np.isin(self.edge_sides, ("bottom", "top")), self.hx, self.hy)

    def edge_normals(self) -> np.ndarray:
        table = {"bottom": (0.0, -1.0), "right": (1.0, 0.0), "top": (0.0, 1.0), "left": (-1.0, 0.0)}
        return np.array([table[s] for s in self.edge_sides])

    def boundary_nodes(self) -> np.ndarray:
        return np.unique(self.boundary_edges)

    def periodic_dofs(self) -> tuple[np.ndarray, int]:
        """Map identifying opposite faces; returns (dof of each node, n_dofs)."""
        iy, ix = np.divmod(np.arange(self.n_nodes), self.nx + 1)
        dof = (iy % self.ny) * self.nx + (ix % self.nx)
        return dof, self.nx * self.ny

    def gauss_points(self) -> np.ndarray:
        """Physical Gauss points, shape (ne, 4, 2)."""
        origin = self.coordinates()[self.conn[:, 0]]
        return origin[:, None, :] + GAUSS_REF[None, :, :] * np.array([self.hx, self.hy])

    def reference(self):
        """Per-element integrals reused by every assembly routine.

        Returns ``N`` (4 gauss, 4 nodes), ``dN`` (4 gauss, 4 nodes, 2) in
        physical units and the Gauss weights times element area.
        """
        vals, grads = zip(*(_shape(*g) for g in GAUSS_REF))
        N = np.array(vals)
        dN = np.array(grads) / np.array([self.hx, self.hy])
        return N, dN, GAUSS_W * self.element_area

    def element_gradients(self, nodal) -> np.ndarray:
        """Gradient of the Q1 interpolant at the Gauss points, shape (ne, 4, 2)."""
        _, dN, _ = self.reference()
        return np.einsum("gia,ei->ega", dN, np.asarray(nodal)[self.conn])

    def element_means(self, nodal) -> np.ndarray:
        """Centroid value of the Q1 interpolant (mean of the four nodes)."""
        return np.asarray(nodal)[self.conn].mean(axis=1)


@dataclass(frozen=True, eq=False)
class SparseOperator:
    matrix: sp.csr_matrix
    symmetric: bool = False

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, x):
        return self.matrix @ x

    def __add__(self, other):
        om = other.matrix if isinstance(other, SparseOperator) else other
        sym = self.symmetric and (other.symmetric if isinstance(other, SparseOperator) else False)
        return SparseOperator((self.matrix + om).tocsr(), sym)

    def scaled(self, s: float) -> "SparseOperator":
        return SparseOperator((self.matrix * s).tocsr(), self.symmetric)

    def diagonal(self):
        return self.matrix.diagonal()

    def toarray(self):
        return self.matrix.toarray()


def _scatter(grid, local, dof_map=None, n_dofs=None):
    conn = grid.conn if dof_map is None else dof_map[grid.conn]
    n = grid.n_nodes if n_dofs is None else n_dofs
    rows = np.repeat(conn, 4, axis=1).ravel()
    cols = np.tile(conn, (1, 4)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def _stiffness_parts(grid):
    """S[a, b, i, j] = int dN_i/dx_a dN_j/dx_b over one element."""
    _, dN, w = grid.reference()
    return np.einsum("g,gia,gjb->abij", w, dN, dN)


def element_stiffness(grid, coeff) -> np.ndarray:
    """Local stiffness blocks, shape (ne, 4, 4); coeff scalar, (ne,) or (ne, 2, 2)."""
    coeff = np.asarray(coeff, dtype=float)
    if coeff.ndim == 0:
        coeff = np.full(grid.n_elements, float(coeff))
    if coeff.ndim == 1:
        if coeff.shape[0] != grid.n_elements:
            raise AssemblyError(f"expected {grid.n_elements} element coefficients, got {coeff.shape[0]}")
        if not np.all(np.isfinite(coeff)) or np.any(coeff <= 0.0):
            raise AssemblyError("diffusion coefficient must be positive and finite on every element")
        tensor = coeff[:, None, None] * np.eye(2)
    elif coeff.shape == (grid.n_elements, 2, 2):
        if not np.all(np.isfinite(coeff)):
            raise AssemblyError("diffusion tensor must be finite")
        tensor = 0.5 * (coeff + coeff.transpose(0, 2, 1))
        if np.any(np.linalg.eigvalsh(tensor)[:, 0] <= 0.0):
            raise AssemblyError("diffusion tensor must be positive definite on every element")
    else:
        raise AssemblyError(f"bad coefficient shape {coeff.shape}")
    local = np.einsum("eab,abij->eij", tensor, _stiffness_parts(grid))
    # exact symmetry: quadrature round-off differs between (i, j) and (j, i)
    return 0.5 * (local + local.transpose(0, 2, 1))


def assemble_diffusion(grid, coeff, dof_map=None, n_dofs=None) -> SparseOperator:
    """Stiffness matrix of -div(coeff grad u) without boundary terms."""
    K = _scatter(grid, element_stiffness(grid, coeff), dof_map, n_dofs)
    return SparseOperator(K, symmetric=True)


def lumped_mass_vector(grid, weight=1.0) -> np.ndarray:
    """Row sums of the consistent mass matrix: sum over elements of w_e |e| / 4."""
    weight = np.broadcast_to(np.asarray(weight, dtype=float), (grid.n_elements,))
    if np.any(weight < 0.0):
        raise AssemblyError("mass weight must be nonnegative")
    out = np.zeros(grid.n_nodes)
    np.add.at(out, grid.conn, np.repeat(weight[:, None] * grid.element_area / 4.0, 4, axis=1))
    return out


def assemble_lumped_mass(grid, weight=1.0) -> SparseOperator:
    return SparseOperator(sp.diags(lumped_mass_vector(grid, weight)).tocsr(), symmetric=True)


def assemble_consistent_mass(grid, weight=1.0) -> SparseOperator:
    weight = np.broadcast_to(np.asarray(weight, dtype=float), (grid.n_elements,))
    N, _, w = grid.reference()
    Me = np.einsum("g,gi,gj->ij", w, N, N)
    return SparseOperator(_scatter(grid, weight[:, None, None] * Me), symmetric=True)


def boundary_mass_vector(grid, sides=SIDES) -> np.ndarray:
    """Lumped boundary mass: each boundary edge gives half its length to both ends."""
    sel = np.isin(grid.edge_sides, sides)
    out = np.zeros(grid.n_nodes)
    half = 0.5 * grid.edge_lengths()[sel]
    np.add.at(out, grid.boundary_edges[sel, 0], half)
    np.add.at(out, grid.boundary_edges[sel, 1], half)
    return out


def assemble_robin(grid, coefficient, ambient, sides=SIDES):
    """Lumped Robin form for ``coefficient * (u - ambient)`` on the given sides.

    ``ambient`` is a scalar, one value per boundary edge (order of
    ``grid.boundary_edges``) or one value per edge endpoint, shape
    (n_edges, 2).  Returns ``(operator, load)``.
    """
    if coefficient < 0.0:
        raise AssemblyError("Robin coefficient must be nonnegative")
    sel = np.isin(grid.edge_sides, sides)
    amb = np.asarray(ambient, dtype=float)
    if amb.ndim == 1:
        amb = amb[:, None]
    amb = np.broadcast_to(amb, grid.boundary_edges.shape)
    diag = np.zeros(grid.n_nodes)
    load = np.zeros(grid.n_nodes)
    half = 0.5 * grid.edge_lengths() * coefficient
    for k in (0, 1):
        np.add.at(diag, grid.boundary_edges[sel, k], half[sel])
        np.add.at(load, grid.boundary_edges[sel, k], (half * amb[:, k])[sel])
    return SparseOperator(sp.diags(diag).tocsr(), symmetric=True), load


def assemble_convection(grid, velocity) -> SparseOperator:
    """C[i, j] = int N_j (v . grad N_i): the form int theta v . grad psi.

    ``velocity`` is one vector per element, shape (ne, 2), or one per Gauss
    point, shape (ne, 4, 2).
    """
    v = np.asarray(velocity, dtype=float)
    if v.shape == (grid.n_elements, 2):
        v = np.repeat(v[:, None, :], 4, axis=1)
    if v.shape != (grid.n_elements, 4, 2):
        raise AssemblyError(f"bad velocity shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise AssemblyError("velocity must be finite")
    N, dN, w = grid.reference()
    local = np.einsum("g,ega,gia,gj->eij", w, v, dN, N)
    return SparseOperator(_scatter(grid, local), symmetric=False)


# --------------------------------------------------------------------------
# linear solvers


def _check_tol(rel_tol):
    if not 0.0 < rel_tol <= 1e-4:
        raise ValueError(f"rel_tol must lie in (0, 1e-4], got {rel_tol}")


def _as_matrix(op):
    return op.matrix if isinstance(op, SparseOperator) else sp.csr_matrix(op)


def _jacobi(A):
    d = A.diagonal().astype(float)
    d[d == 0.0] = 1.0
    return spla.LinearOperator(A.shape, matvec=lambda x: x / d, dtype=float)


def _krylov(method, A, b, rel_tol, maxiter, x0):
    history = []
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b), [0.0]

    def cb(xk):
        if np.ndim(xk) == 0:  # gmres legacy callback hands over a residual norm
            history.append(float(xk))
        else:
            history.append(float(np.linalg.norm(b - A @ xk)) / bnorm)

    kwargs = dict(rtol=rel_tol, atol=0.0, maxiter=maxiter, M=_jacobi(A), x0=x0, callback=cb)
    if method is spla.gmres:
        kwargs.update(restart=100, callback_type="x")
    x, _ = method(A, b, **kwargs)
    res = float(np.linalg.norm(b - A @ x)) / bnorm
    history.append(res)
    return x, history


def solve_spd(op, rhs, rel_tol=1e-10, maxiter=None, x0=None):
    """Jacobi-preconditioned conjugate gradients; checks the true residual."""
    _check_tol(rel_tol)
    A = _as_matrix(op)
    b = np.asarray(rhs, dtype=float)
    if A.shape[0] != b.shape[0]:
        raise ValueError("operator and right-hand side dimensions differ")
    maxiter = maxiter or max(10 * A.shape[0], 1000)
    x, hist = _krylov(spla.cg, A, b, rel_tol, maxiter, x0)
    # the recurrence residual drifts from the true one near round-off; restart
    for _ in range(3):
        if hist[-1] <= rel_tol:
            break
        x, more = _krylov(spla.cg, A, b, 0.5 * rel_tol, maxiter, x)
        hist = hist + more
    if hist[-1] > rel_tol:
        raise SolverError(f"CG did not reach rel_tol={rel_tol:g} (residual {hist[-1]:.3e})", hist)
    return x


def solve_general(op, rhs, rel_tol=1e-10, maxiter=None, x0=None):
    """BiCGSTAB with Jacobi preconditioning, GMRES as fallback."""
    _check_tol(rel_tol)
    A = _as_matrix(op)
    b = np.asarray(rhs, dtype=float)
    if A.shape[0] != b.shape[0]:
        raise ValueError("operator and right-hand side dimensions differ")
    maxiter = maxiter or max(4 * A.shape[0], 1000)
    x, hist = _krylov(spla.bicgstab, A, b, rel_tol, maxiter, x0)
    if hist[-1] <= rel_tol:
        return x
    x, hist2 = _krylov(spla.gmres, A, b, rel_tol, maxiter, x)
    hist = hist + hist2
    if hist[-1] > rel_tol:
        raise SolverError(f"BiCGSTAB/GMRES did not reach rel_tol={rel_tol:g} (residual {hist[-1]:.3e})", hist)
    return x


# --------------------------------------------------------------------------
# norms


def l2_norm(grid, field_values) -> float:
    """L2(Omega) norm of the Q1 interpolant (consistent mass)."""
    u = np.asarray(field_values, dtype=float)
    if u.shape != (grid.n_nodes,):
        raise ValueError(f"field has shape {u.shape}, grid has {grid.n_nodes} nodes")
    M = assemble_consistent_mass(grid).matrix
    return float(np.sqrt(max(u @ (M @ u), 0.0)))


def l2_distance_spacetime(grid, traj_a, traj_b, h: float) -> float:
    """L2(Omega x (0,T)) distance of piecewise-constant-in-time interpolants.

    Trajectories have shape (n+1, n_nodes); level i represents (t_{i-1}, t_i].
    """
    a = np.asarray(traj_a, dtype=float)
    b = np.asarray(traj_b, dtype=float)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != grid.n_nodes:
        raise ValueError(f"trajectory shapes {a.shape} and {b.shape} do not match the grid")
    M = assemble_consistent_mass(grid).matrix
    d = (a - b)[1:]
    return float(np.sqrt(max(h * np.einsum("in,in->", d, (M @ d.T).T), 0.0)))
