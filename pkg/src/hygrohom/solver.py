"""
Semi-implicit time stepping for the coupled pressure / temperature / memory system.

One step, given (p, theta, r) at level i-1:

1. pressure: implicit in p^i, rewritten in u = kappa(p^i) so that the
   diffusion term is linear in u; k_c(r^{i-1}) and mu(theta^{i-1}) are
   lagged, the memory inside the storage term is eliminated through
   r^i = r^{i-1} + h f(p^i, theta^{i-1}, r^{i-1});
2. memory: the explicit update above;
3. temperature: one linear solve with lambda lagged at level i-1 and the
   convective flux a(p^i, theta^{i-1}, r^{i-1}) grad p^i.

Time derivative and boundary terms use lumped (row-sum) masses, diffusion the
Q1 stiffness.  The same stepper serves the eps-periodic problem and the
homogenised one; only the coefficient provider changes.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .cell import ContrastTable, query_effective_Lambda
from .errors import ConfigurationError, PecletError, SolverError, StepFailure
from .fem import (StructuredGrid, assemble_convection, assemble_diffusion, boundary_mass_vector,
                  lumped_mass_vector, solve_general, solve_spd)
from .materials import KirchhoffMap, MaterialLaws, PhysicalConstants
from .microstructure import MesoTiling


# --------------------------------------------------------------------------
# coefficient providers


class CoefficientProvider:
    """Per-element coefficients evaluated at centroid means of lagged nodal states.

    Subclasses set ``grid``, the nodal lumped phase weights ``wc`` and ``wa``
    (integrals of chi_c N_k and chi_a N_k) and implement the two coefficient
    hooks.  The hydraulic coefficient excludes the factor k_R(S(p)), which
    the Kirchhoff variable absorbs.
    """

    grid: StructuredGrid
    laws: MaterialLaws
    constants: PhysicalConstants
    wc: np.ndarray
    wa: np.ndarray
    mode: str = "abstract"

    def hydraulic_coefficient(self, theta_prev, r_prev):
        raise NotImplementedError

    def thermal_coefficient(self, p_prev, theta_prev, r_prev):
        raise NotImplementedError

    # nodal lumped quantities shared by both modes
    def water_content(self, p, r):
        """Lumped b: rho_w (wc phi_c(r) + wa phi_a) S(p), per node."""
        L = self.laws
        return self.constants.rho_w * (self.wc * L.phi_c(r) + self.wa * L.phi_a) * L.saturation(p)

    def skeleton_capacity(self, r):
        c, L = self.constants, self.laws
        return (self.wc * c.rho_sc * c.c_sc * (1.0 - L.phi_c(r))
                + self.wa * c.rho_sa * c.c_sa * (1.0 - L.phi_a))


class MesoProvider(CoefficientProvider):
    mode = "meso"

    def __init__(self, tiling: MesoTiling, laws: MaterialLaws, constants: PhysicalConstants):
        self.tiling = tiling
        self.laws = laws
        self.constants = constants
        n = tiling.macro_resolution
        self.grid = StructuredGrid(n, n)
        self.chi = tiling.element_cement()
        self.wc = lumped_mass_vector(self.grid, self.chi)
        self.wa = lumped_mass_vector(self.grid, 1.0 - self.chi)

    def hydraulic_coefficient(self, theta_prev, r_prev):
        g, L = self.grid, self.laws
        th, r = g.element_means(theta_prev), g.element_means(r_prev)
        return self.constants.rho_w / L.mu(th) * (self.chi * L.k_c(r) + (1.0 - self.chi) * L.k_a)

    def thermal_coefficient(self, p_prev, theta_prev, r_prev):
        g, L = self.grid, self.laws
        p, th, r = g.element_means(p_prev), g.element_means(theta_prev), g.element_means(r_prev)
        return self.chi * L.lambda_c(p, th, r) + (1.0 - self.chi) * L.lambda_a(p, th)


class MacroProvider(CoefficientProvider):
    mode = "macro"

    def __init__(self, grid: StructuredGrid, table_a: ContrastTable, table_lambda: ContrastTable,
                 chi_c_star: float, laws: MaterialLaws, constants: PhysicalConstants):
        if not 0.0 <= chi_c_star <= 1.0:
            raise ConfigurationError(f"cement volume fraction must lie in [0, 1], got {chi_c_star}")
        self.grid = grid
        self.table_a = table_a
        self.table_lambda = table_lambda
        self.chi_c_star = float(chi_c_star)
        self.laws = laws
        self.constants = constants
        m = lumped_mass_vector(grid, 1.0)
        self.wc = self.chi_c_star * m
        self.wa = (1.0 - self.chi_c_star) * m

    def hydraulic_coefficient(self, theta_prev, r_prev):
        g, L = self.grid, self.laws
        th, r = g.element_means(theta_prev), g.element_means(r_prev)
        scale = self.constants.rho_w / L.mu(th) * L.k_a
        return scale[:, None, None] * self.table_a(L.k_c(r) / L.k_a)

    def thermal_coefficient(self, p_prev, theta_prev, r_prev):
        g = self.grid
        p, th, r = g.element_means(p_prev), g.element_means(theta_prev), g.element_means(r_prev)
        return query_effective_Lambda(self.table_lambda, self.laws, p, th, r)


# --------------------------------------------------------------------------
# state, configuration, reports


@dataclass(frozen=True)
class SimulationState:
    step: int
    time: float
    p: np.ndarray
    theta: np.ndarray
    r: np.ndarray


@dataclass(frozen=True)
class TimeStepConfig:
    h: float
    tol_p: float = 1e-9
    max_iter: int = 200
    linear_rel_tol: float = 1e-10
    damping: float = 0.7         # backtracking factor of the Newton line search
    peclet_limit: float = 2.0
    kirchhoff_cells: int = 512   # table cells per unit pressure

    def __post_init__(self):
        if not self.h > 0.0:
            raise ConfigurationError(f"time step must be positive, got {self.h}")
        if not self.tol_p > 0.0:
            raise ConfigurationError(f"tol_p must be positive, got {self.tol_p}")
        if not 0.0 < self.damping < 1.0:
            raise ConfigurationError(f"damping must lie in (0, 1), got {self.damping}")
        if not 0.0 < self.linear_rel_tol <= 1e-4:
            raise ConfigurationError(f"linear_rel_tol must lie in (0, 1e-4], got {self.linear_rel_tol}")


@dataclass
class StepReport:
    step: int
    iterations: int = 0
    converged: bool = False
    residual_history: list = field(default_factory=list)
    pressure_residual: float = float("nan")
    mass_balance_defect: float = float("nan")
    temperature_residual: float = float("nan")
    max_principle_ok: bool = True
    memory_ok: bool = True
    peclet: float = 0.0
    p_min: float = float("nan")
    p_max: float = float("nan")
    theta_min: float = float("nan")
    theta_max: float = float("nan")
    r_min: float = float("nan")
    r_max: float = float("nan")
    wall_time: float = 0.0

    CSV_FIELDS = ("step", "iterations", "converged", "pressure_residual", "mass_balance_defect",
                  "temperature_residual", "max_principle_ok", "memory_ok", "peclet", "p_min", "p_max",
                  "theta_min", "theta_max", "r_min", "r_max", "wall_time")

    def csv_row(self) -> list:
        return [getattr(self, k) for k in self.CSV_FIELDS]


@dataclass
class Trajectory:
    grid: StructuredGrid
    h: float
    p: list
    theta: list
    r: list
    reports: list = field(default_factory=list)
    wc: np.ndarray | None = None
    wa: np.ndarray | None = None
    mb: np.ndarray | None = None

    @property
    def n_steps(self) -> int:
        return len(self.p) - 1

    @property
    def times(self) -> np.ndarray:
        return self.h * np.arange(self.n_steps + 1)

    def arrays(self):
        return np.array(self.p), np.array(self.theta), np.array(self.r)

    def state(self, i: int) -> SimulationState:
        return SimulationState(i, i * self.h, self.p[i], self.theta[i], self.r[i])


# --------------------------------------------------------------------------
# the stepper


class CoupledStepper:
    """Holds the step-independent pieces (Kirchhoff table, boundary masses)."""

    def __init__(self, provider: CoefficientProvider, cfg: TimeStepConfig):
        self.provider = provider
        self.cfg = cfg
        self.laws = provider.laws
        self.c = provider.constants
        self.grid = provider.grid
        self.kmap = KirchhoffMap(self.laws, self.c.p_inf, cells_per_unit=cfg.kirchhoff_cells)
        self.mb = boundary_mass_vector(self.grid)
        self._fd = 1e-7
        self._peclet_warned = False

    # -- pressure ----------------------------------------------------------
    def _nodal_terms(self, p, theta_prev, r_prev):
        """Nodal part of the pressure residual and its derivative in p."""
        L, c, h = self.laws, self.c, self.cfg.h
        pv = self.provider

        def g(q):
            f = L.hydration(q, theta_prev, r_prev)
            r_new = r_prev + h * f
            store = c.rho_w / h * (pv.wc * L.phi_c(r_new) + pv.wa * L.phi_a) * L.saturation(q)
            return store + c.beta_e * self.mb * (q - c.p_inf) - c.alpha1 * pv.wc * f

        d = self._fd * np.maximum(1.0, np.abs(p))
        dg = (g(p + d) - g(p - d)) / (2.0 * d)
        return g(p), dg

    def _pressure_parts(self, p, theta_prev, r_prev, b_prev):
        """(storage, boundary, source) nodal vectors of the pressure equation."""
        L, c, h = self.laws, self.c, self.cfg.h
        f = L.hydration(p, theta_prev, r_prev)
        store = (self.provider.water_content(p, r_prev + h * f) - b_prev) / h
        bnd = c.beta_e * self.mb * (p - c.p_inf)
        src = c.alpha1 * self.provider.wc * f
        return store, bnd, src

    def pressure_step(self, prev: SimulationState, report: StepReport | None = None):
        cfg, c = self.cfg, self.c
        report = report or StepReport(prev.step + 1)
        coeff = self.provider.hydraulic_coefficient(prev.theta, prev.r)
        K = assemble_diffusion(self.grid, coeff).matrix
        b_prev = self.provider.water_content(prev.p, prev.r)
        rhs_const = b_prev / cfg.h

        def residual(u):
            p = self.kmap.inverse(u)
            g, dg = self._nodal_terms(p, prev.theta, prev.r)
            return K @ u + g - rhs_const, p, dg

        u = self.kmap.forward(prev.p)
        p = prev.p
        g, dg = self._nodal_terms(p, prev.theta, prev.r)
        F = K @ u + g - rhs_const
        scale = max(float(np.max(np.abs(rhs_const))), float(np.max(np.abs(c.beta_e * self.mb * c.p_inf))), 1e-300)
        hist = [float(np.max(np.abs(F))) / scale]
        converged = hist[-1] <= cfg.tol_p
        it = 0
        polished = converged  # an already balanced state is kept as it is
        while it < cfg.max_iter and not polished:
            if converged:
                polished = True  # one extra Newton step drives the residual to round-off
            it += 1
            jac_diag = np.maximum(dg, 0.0) / self.kmap.k_tilde(p)
            J = (K + _diag(jac_diag)).tocsr()
            try:
                du = solve_spd(J, -F, rel_tol=cfg.linear_rel_tol)
            except SolverError as exc:
                raise StepFailure(f"pressure Newton linear solve failed: {exc}", prev.step + 1,
                                  hist) from exc
            lam = 1.0
            f0 = float(np.linalg.norm(F))
            while True:
                u_try = self.kmap.clip_u(u + lam * du)
                F_try, p_try, dg_try = residual(u_try)
                if np.linalg.norm(F_try) <= (1.0 - 1e-4 * lam) * f0 or lam < 1e-6:
                    break
                lam *= cfg.damping
            if polished and np.linalg.norm(F_try) > f0:
                break
            u, F, p, dg = u_try, F_try, p_try, dg_try
            hist.append(float(np.max(np.abs(F))) / scale)
            converged = converged or hist[-1] <= cfg.tol_p
        report.iterations = it
        report.residual_history = hist
        report.converged = converged
        report.pressure_residual = hist[-1]
        if not converged:
            raise StepFailure(
                f"pressure iteration did not converge in {cfg.max_iter} iterations "
                f"(residual {hist[-1]:.3e} > tol_p {cfg.tol_p:g})", prev.step + 1, hist)
        store, bnd, src = self._pressure_parts(p, prev.theta, prev.r, b_prev)
        stored = max(float(np.sum(b_prev)), float(np.sum(store * cfg.h + b_prev))) / cfg.h
        report.mass_balance_defect = mass_balance_defect(store, bnd, src, stored)
        report.p_min, report.p_max = float(p.min()), float(p.max())
        report.max_principle_ok = bool(p.min() >= c.p_inf - 1e-9 and p.max() <= 1e-9)
        self._u = u
        self._coeff = coeff
        return p, report

    # -- memory ------------------------------------------------------------
    def memory_step(self, p_new, prev: SimulationState):
        return memory_step(self.laws, p_new, prev, self.cfg.h)

    # -- temperature -------------------------------------------------------
    def convective_velocity(self, coeff, u):
        """c_w a grad p at the Gauss points, from the Kirchhoff variable."""
        grad_u = self.grid.element_gradients(u)
        coeff = np.asarray(coeff)
        if coeff.ndim == 1:
            flux = coeff[:, None, None] * grad_u
        else:
            flux = np.einsum("eab,egb->ega", coeff, grad_u)
        return self.c.c_w * flux

    def temperature_step(self, p_new, r_new, prev: SimulationState, report: StepReport | None = None,
                         u_new=None, hydraulic=None, extra_load=None):
        """One linear solve for theta^i; ``extra_load`` is an optional nodal load (e.g. manufactured forcing)."""
        cfg, c, L, pv = self.cfg, self.c, self.laws, self.provider
        report = report or StepReport(prev.step + 1)
        u_new = self.kmap.forward(p_new) if u_new is None else u_new
        hydraulic = pv.hydraulic_coefficient(prev.theta, prev.r) if hydraulic is None else hydraulic
        vel = self.convective_velocity(hydraulic, u_new)
        pe = float(np.max(np.linalg.norm(vel, axis=-1))) * max(self.grid.hx, self.grid.hy) / L.bounds.lam1
        report.peclet = pe
        if pe > cfg.peclet_limit:
            raise PecletError(f"element Peclet number {pe:.3g} exceeds {cfg.peclet_limit}; refine the grid")
        if pe > 0.5 * cfg.peclet_limit and not self._peclet_warned:
            warnings.warn(f"element Peclet number {pe:.3g} is close to the limit {cfg.peclet_limit}",
                          RuntimeWarning, stacklevel=2)
            self._peclet_warned = True

        lam = pv.thermal_coefficient(prev.p, prev.theta, prev.r)
        A = assemble_diffusion(self.grid, lam).matrix + assemble_convection(self.grid, vel).matrix
        b_new = pv.water_content(p_new, r_new)
        b_old = pv.water_content(prev.p, prev.r)
        s_new = pv.skeleton_capacity(r_new)
        s_old = pv.skeleton_capacity(prev.r)
        diag = ((c.c_w * b_new + s_new) / cfg.h + c.alpha_e * self.mb
                + c.c_w * c.beta_e * self.mb * (p_new - c.p_inf))
        f = L.hydration(p_new, prev.theta, prev.r)
        rhs = ((c.c_w * b_old + s_old) * prev.theta / cfg.h + c.alpha_e * self.mb * c.theta_inf
               + c.alpha2 * pv.wc * f)
        if extra_load is not None:
            rhs = rhs + extra_load
        A = (A + _diag(diag)).tocsr()
        try:
            theta = solve_general(A, rhs, rel_tol=cfg.linear_rel_tol, x0=prev.theta.copy())
        except SolverError as exc:
            raise StepFailure(f"temperature solve failed: {exc}", prev.step + 1,
                              exc.residual_history) from exc
        report.temperature_residual = float(np.linalg.norm(A @ theta - rhs) / max(np.linalg.norm(rhs), 1e-300))
        report.theta_min, report.theta_max = float(theta.min()), float(theta.max())
        return theta, report

    # -- full step ---------------------------------------------------------
    def step(self, prev: SimulationState) -> tuple[SimulationState, StepReport]:
        t0 = time.perf_counter()
        report = StepReport(prev.step + 1)
        p, report = self.pressure_step(prev, report)
        r = self.memory_step(p, prev)
        theta, report = self.temperature_step(p, r, prev, report, u_new=self._u, hydraulic=self._coeff)
        t_new = prev.time + self.cfg.h
        report.r_min, report.r_max = float(r.min()), float(r.max())
        # per step: nondecreasing with increment <= C_f h, which gives r <= C_f t from r0 = 0
        dr = r - prev.r
        report.memory_ok = bool(np.all(dr >= 0.0) and dr.max() <= self.laws.bounds.c_f * self.cfg.h * (1 + 1e-12))
        report.wall_time = time.perf_counter() - t0
        return SimulationState(prev.step + 1, t_new, p, theta, r), report


def _diag(v):
    return sp.diags(v)


def mass_balance_defect(storage, boundary, source, stored: float = 0.0) -> float:
    """|sum(storage + boundary - source)| relative to the largest term of the balance.

    ``stored`` is the larger of sum(b^i)/h and sum(b^{i-1})/h: the storage
    difference is formed from these two terms, so round-off in the balance
    scales with them rather than with their (possibly tiny) difference.
    """
    terms = [float(np.sum(storage)), float(np.sum(boundary)), float(np.sum(source))]
    scale = max(max(abs(t) for t in terms), abs(stored))
    if scale == 0.0:
        return 0.0
    return abs(terms[0] + terms[1] - terms[2]) / scale


def memory_step(laws: MaterialLaws, p_new, prev: SimulationState, h: float):
    """r^i = r^{i-1} + h f(p^i, theta^{i-1}, r^{i-1})."""
    return prev.r + h * laws.hydration(p_new, prev.theta, prev.r)


def pressure_step(prev: SimulationState, provider: CoefficientProvider, cfg: TimeStepConfig):
    return CoupledStepper(provider, cfg).pressure_step(prev)


def temperature_step(p_new, r_new, prev: SimulationState, provider: CoefficientProvider, cfg: TimeStepConfig):
    return CoupledStepper(provider, cfg).temperature_step(p_new, r_new, prev)


def check_initial_data(p0, theta0, constants: PhysicalConstants):
    p0 = np.asarray(p0, dtype=float)
    theta0 = np.asarray(theta0, dtype=float)
    if not np.all(np.isfinite(p0)) or not np.all(np.isfinite(theta0)):
        raise ConfigurationError("initial data must be finite")
    if np.any(p0 <= constants.p_inf) or np.any(p0 > 0.0):
        raise ConfigurationError(
            f"initial pressure must satisfy p_inf < p0 <= 0 (p_inf = {constants.p_inf}); "
            f"got range [{p0.min()}, {p0.max()}]")


def run_simulation(initial, provider: CoefficientProvider, cfg: TimeStepConfig, n_steps: int,
                   callback=None) -> Trajectory:
    """Compose the steps from (p0, theta0) with r0 = 0.

    ``initial`` holds nodal arrays or scalars.  A failing step raises
    StepFailure carrying the partial trajectory.
    """
    if n_steps < 0:
        raise ConfigurationError("n_steps must be nonnegative")
    n = provider.grid.n_nodes
    p0 = np.broadcast_to(np.asarray(initial[0], dtype=float), (n,)).copy()
    th0 = np.broadcast_to(np.asarray(initial[1], dtype=float), (n,)).copy()
    check_initial_data(p0, th0, provider.constants)
    stepper = CoupledStepper(provider, cfg)
    traj = Trajectory(provider.grid, cfg.h, [p0], [th0], [np.zeros(n)], [],
                      provider.wc, provider.wa, stepper.mb)
    state = traj.state(0)
    for _ in range(n_steps):
        try:
            state, report = stepper.step(state)
        except (StepFailure, PecletError) as exc:
            exc.trajectory = traj
            raise
        except SolverError as exc:
            raise StepFailure(str(exc), state.step + 1, exc.residual_history, traj) from exc
        traj.p.append(state.p)
        traj.theta.append(state.theta)
        traj.r.append(state.r)
        traj.reports.append(report)
        if callback is not None:
            callback(state, report)
    return traj
