"""
Numerical experiments: eps-sweeps, a priori monitors, time translations,
oscillating averages and time-step self-convergence.

All monitors are pure functions of finished trajectories.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cell import build_tables, max_workers
from .errors import ConfigurationError
from .fem import (StructuredGrid, assemble_consistent_mass, assemble_diffusion, boundary_mass_vector,
                  l2_distance_spacetime, lumped_mass_vector)
from .materials import MaterialLaws, PhysicalConstants, eval_theta_potential
from .microstructure import CellRaster, MesoTiling, cells_per_side, volume_fraction
from .solver import MacroProvider, MesoProvider, TimeStepConfig, Trajectory, run_simulation

_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


# --------------------------------------------------------------------------
# eps-sweep


@dataclass
class EpsilonSweepConfig:
    epsilons: list
    resolutions: list          # meso grid elements per side, one per eps
    raster: CellRaster
    laws: MaterialLaws
    constants: PhysicalConstants
    step: TimeStepConfig
    n_steps: int
    initial: tuple = (-0.2, 1.0)
    macro_resolution: int | None = None
    cell_resolution: int = 32

    def __post_init__(self):
        if len(self.epsilons) != len(self.resolutions):
            raise ConfigurationError("need exactly one grid resolution per epsilon")
        if not self.epsilons:
            raise ConfigurationError("epsilon list is empty")
        for eps, n in zip(self.epsilons, self.resolutions):
            MesoTiling(eps, self.raster, n)  # raises when the grid does not resolve the cells
        if self.cell_resolution % self.raster.m:
            raise ConfigurationError("cell resolution must be a multiple of the raster size")

    @property
    def output_resolution(self) -> int:
        n = self.macro_resolution or min(self.resolutions)
        return math.gcd(n, *self.resolutions)


@dataclass
class ErrorReport:
    epsilons: list
    error_p: list
    error_theta: list
    error_r: list
    boundary_p: list
    boundary_theta: list
    trajectories: dict = field(default_factory=dict, repr=False)

    @property
    def decreasing(self) -> bool:
        """Informative only: convergence is claimed along subsequences."""
        return all(b < a for a, b in zip(self.error_p, self.error_p[1:])) and \
            all(b < a for a, b in zip(self.error_theta, self.error_theta[1:]))

    def final_ratio(self, name: str = "p") -> float:
        seq = getattr(self, f"error_{name}")
        return seq[-1] / seq[0] if seq[0] > 0 else 0.0

    def to_csv(self, path) -> None:
        lines = ["epsilon,error_p,error_theta,error_r,boundary_p,boundary_theta"]
        for row in zip(self.epsilons, self.error_p, self.error_theta, self.error_r,
                       self.boundary_p, self.boundary_theta):
            lines.append(",".join(format(float(v), ".17g") for v in row))
        Path(path).write_text("\n".join(lines) + "\n")


def restrict(fine_grid: StructuredGrid, values, coarse: int) -> np.ndarray:
    """Nodal restriction onto the nodes shared with a coarse grid."""
    q = fine_grid.nx // coarse
    if q * coarse != fine_grid.nx:
        raise ConfigurationError(f"grid {fine_grid.nx} does not contain grid {coarse}")
    v = np.asarray(values)
    shaped = v.reshape(v.shape[:-1] + (fine_grid.ny + 1, fine_grid.nx + 1))
    return shaped[..., ::q, ::q].reshape(v.shape[:-1] + ((coarse + 1) ** 2,))


def _boundary_distance(grid, a, b, h):
    mb = boundary_mass_vector(grid)
    d = (np.asarray(a) - np.asarray(b))[1:]
    return float(np.sqrt(h * np.sum(mb * d ** 2)))


def run_epsilon_sweep(cfg: EpsilonSweepConfig, tables=None) -> ErrorReport:
    """Solve the homogenised problem once and the meso problem per eps; compare.

    Distances are space-time L2 norms of nodal restrictions onto the
    coarsest common grid.
    """
    L, c = cfg.laws, cfg.constants
    n_macro = cfg.macro_resolution or max(cfg.resolutions)
    if tables is None:
        tables = build_tables(cfg.raster, L, cfg.cell_resolution)
    macro = MacroProvider(StructuredGrid(n_macro, n_macro), tables[0], tables[1],
                          volume_fraction(cfg.raster), L, c)

    def run(provider):
        return run_simulation(cfg.initial, provider, cfg.step, cfg.n_steps)

    jobs = [macro] + [MesoProvider(MesoTiling(e, cfg.raster, n), L, c)
                      for e, n in zip(cfg.epsilons, cfg.resolutions)]
    with ThreadPoolExecutor(max_workers=max_workers()) as pool:
        trajs = list(pool.map(run, jobs))
    out = cfg.output_resolution
    grid_out = StructuredGrid(out, out)

    def fields(tr):
        return [restrict(tr.grid, np.array(f), out) for f in tr.arrays()]

    ref = fields(trajs[0])
    rep = ErrorReport(list(cfg.epsilons), [], [], [], [], [],
                      {"macro": trajs[0], **{e: t for e, t in zip(cfg.epsilons, trajs[1:])}})
    h = cfg.step.h
    for tr in trajs[1:]:
        p, th, r = fields(tr)
        rep.error_p.append(l2_distance_spacetime(grid_out, p, ref[0], h))
        rep.error_theta.append(l2_distance_spacetime(grid_out, th, ref[1], h))
        rep.error_r.append(l2_distance_spacetime(grid_out, r, ref[2], h))
        rep.boundary_p.append(_boundary_distance(grid_out, p, ref[0], h))
        rep.boundary_theta.append(_boundary_distance(grid_out, th, ref[1], h))
    return rep


# --------------------------------------------------------------------------
# a priori monitors


@dataclass
class BoundCheck:
    name: str
    passed: bool
    margin: float


@dataclass
class AprioriMonitor:
    p_max: np.ndarray
    p_min: np.ndarray
    theta_absmax: np.ndarray
    r_max: np.ndarray
    energy: np.ndarray            # rho_w sum (wc phi_c(r) + wa phi_a) Theta(p), per level
    energy_bound: np.ndarray      # initial energy plus the accumulated source budget
    theta_potential: np.ndarray   # plain lumped integral of Theta(p), per level
    h1_cumulative: np.ndarray     # h sum_k ||p^k||^2_{W^{1,2}}
    checks: list

    @property
    def ok(self) -> bool:
        return all(ch.passed for ch in self.checks)

    def check(self, name: str) -> BoundCheck:
        return next(ch for ch in self.checks if ch.name == name)

    def constants(self) -> dict:
        """Scalar summaries compared across eps (the eps-uniformity surrogate)."""
        return {"energy": float(self.energy.max()), "theta": float(self.theta_absmax.max()),
                "memory": float(self.r_max.max()), "h1": float(self.h1_cumulative[-1])}


def check_apriori_bounds(traj: Trajectory, laws: MaterialLaws, constants: PhysicalConstants,
                         tol: float = 1e-9) -> AprioriMonitor:
    """Evaluate the a priori bounds on every level of a finished trajectory.

    Energy: testing the discrete pressure equation with p^k and using
    Theta(a) - Theta(b) <= (S(a) - S(b)) a together with the M-matrix
    structure of the stiffness yields

        Psi^n <= Psi^0 + sum_k [ h beta_e p_inf^2 / 4 |dOmega|
                                 + h alpha1 sum wc f_k p^k
                                 + rho_w sum wc |phi_c(r^k) - phi_c(r^{k-1})| |S(p^{k-1}) p^k - Theta(p^{k-1})| ]

    with Psi^k = rho_w sum (wc phi_c(r^k) + wa phi_a) Theta(p^k).  Temperature
    with f = 0 must stay between the extreme data; with f != 0 only finiteness
    and a growth envelope are asserted (a surrogate, not a proven constant).
    """
    c = constants
    grid, h = traj.grid, traj.h
    P, TH, R = traj.arrays()
    n = P.shape[0] - 1
    m = lumped_mass_vector(grid)
    wc = traj.wc if traj.wc is not None else m
    wa = traj.wa if traj.wa is not None else 0.0 * m
    mb = traj.mb if traj.mb is not None else boundary_mass_vector(grid)
    thetaP = eval_theta_potential(laws.saturation_prime, P)
    phi = wc * laws.phi_c(R) + wa * laws.phi_a
    energy = c.rho_w * np.sum(phi * thetaP, axis=1)
    budget = np.zeros(n + 1)
    for k in range(1, n + 1):
        f = laws.hydration(P[k], TH[k - 1], R[k - 1])
        src = h * c.alpha1 * np.sum(wc * f * P[k])
        bnd = h * c.beta_e * c.p_inf ** 2 / 4.0 * np.sum(mb)
        dphi = np.abs(laws.phi_c(R[k]) - laws.phi_c(R[k - 1]))
        mem = c.rho_w * np.sum(wc * dphi * np.abs(laws.saturation(P[k - 1]) * P[k] - thetaP[k - 1]))
        budget[k] = budget[k - 1] + src + bnd + mem
    bound = energy[0] + budget

    K1 = assemble_diffusion(grid, 1.0).matrix
    M = assemble_consistent_mass(grid).matrix
    h1 = np.concatenate([[0.0], h * np.cumsum([p @ (K1 @ p) + p @ (M @ p) for p in P[1:]])])

    checks = []
    lo = P.min() - c.p_inf
    checks.append(BoundCheck("p >= p_inf", bool(lo >= -tol), float(lo)))
    hi = -P.max()
    checks.append(BoundCheck("p <= 0", bool(hi >= -tol), float(hi)))
    dr = np.diff(R, axis=0).min() if n else 0.0
    checks.append(BoundCheck("r nondecreasing", bool(dr >= 0.0), float(dr)))
    t = h * np.arange(n + 1)
    rb = np.min(laws.bounds.c_f * t[:, None] * (1 + 1e-12) - R)
    checks.append(BoundCheck("0 <= r <= C_f t", bool(rb >= 0.0 and R.min() >= 0.0), float(min(rb, R.min()))))
    scale = max(abs(bound).max(), 1e-300)
    em = np.min(bound - energy) / scale
    checks.append(BoundCheck("energy <= initial + budget", bool(em >= -tol), float(em)))
    if not np.all(np.isfinite(TH)):
        checks.append(BoundCheck("theta finite", False, float("nan")))
    else:
        checks.append(BoundCheck("theta finite", True, float(np.abs(TH).max())))
        hydrating = np.any(np.diff(R, axis=0) > 0.0)
        if not hydrating:
            tmin = min(TH[0].min(), c.theta_inf)
            tmax = max(TH[0].max(), c.theta_inf)
            width = max(tmax - tmin, abs(tmax), 1.0)
            mg = min(TH.min() - tmin, tmax - TH.max()) / width
            checks.append(BoundCheck("theta within data range", bool(mg >= -tol), float(mg)))
        else:
            cap = min(c.rho_sc * c.c_sc * (1 - laws.bounds.phi2), c.rho_sa * c.c_sa * (1 - laws.phi_a))
            env = (max(np.abs(TH[0]).max(), c.theta_inf) * np.exp(t)
                   + c.alpha2 * laws.bounds.c_f * t / cap)
            mg = np.min(env - np.abs(TH).max(axis=1)) / env.max()
            checks.append(BoundCheck("theta growth envelope", bool(mg >= 0.0), float(mg)))
    return AprioriMonitor(P.max(axis=1), P.min(axis=1), np.abs(TH).max(axis=1), R.max(axis=1),
                          energy, bound, thetaP @ m, h1, checks)


def epsilon_uniformity(monitors: list, factor: float = 3.0) -> dict:
    """Max/min ratio of each monitored constant across runs, flagged against ``factor``.

    A heuristic stand-in for "independent of eps"; no finite sample proves it.
    """
    out = {}
    for key in monitors[0].constants():
        vals = np.array([m.constants()[key] for m in monitors])
        ratio = float(vals.max() / vals.min()) if vals.min() > 0 else (1.0 if vals.max() == 0 else np.inf)
        out[key] = (ratio, ratio < factor)
    return out


# --------------------------------------------------------------------------
# time translations


@dataclass
class TranslationReport:
    taus: list
    E_p: list
    E_theta: list
    E_r: list

    def ratios(self, name: str) -> np.ndarray:
        return np.array(getattr(self, f"E_{name}")) / np.array(self.taus)

    def band(self, name: str) -> float:
        """max/min of E(tau)/tau over the tau list."""
        r = self.ratios(name)
        return float(r.max() / r.min()) if r.min() > 0 else (1.0 if r.max() == 0 else np.inf)

    def to_csv(self, path) -> None:
        lines = ["tau,E_p,E_theta,E_r"]
        for row in zip(self.taus, self.E_p, self.E_theta, self.E_r):
            lines.append(",".join(format(float(v), ".17g") for v in row))
        Path(path).write_text("\n".join(lines) + "\n")


def translation_estimate(traj: Trajectory, tau_list, laws: MaterialLaws) -> TranslationReport:
    """Discrete time-translation functionals of the piecewise-constant trajectory.

    E_p(tau) = h sum_{i=1}^{n-k} (S(p^{i+k}) - S(p^i), p^{i+k} - p^i) with the
    lumped mass (each nodal product is nonnegative); E_theta and E_r are plain
    L2 (consistent mass) squared translations.
    """
    h = traj.h
    P, TH, R = traj.arrays()
    n = P.shape[0] - 1
    m = lumped_mass_vector(traj.grid)
    M = assemble_consistent_mass(traj.grid).matrix
    S = laws.saturation(P)
    rep = TranslationReport([], [], [], [])
    for tau in tau_list:
        k = int(round(tau / h))
        if k < 1 or abs(k * h - tau) > 1e-9 * max(h, abs(tau)):
            raise ConfigurationError(f"tau={tau} is not a positive multiple of h={h}")
        if k >= n:
            raise ConfigurationError(f"tau={tau} is not shorter than the run length {n * h}")
        dS = S[1 + k:] - S[1:n + 1 - k]
        dP = P[1 + k:] - P[1:n + 1 - k]
        dT = TH[1 + k:] - TH[1:n + 1 - k]
        dR = R[1 + k:] - R[1:n + 1 - k]
        rep.taus.append(float(tau))
        rep.E_p.append(float(h * np.sum(m * dS * dP)))
        rep.E_theta.append(float(h * np.einsum("in,in->", dT, (M @ dT.T).T)))
        rep.E_r.append(float(h * np.einsum("in,in->", dR, (M @ dR.T).T)))
    return rep


# --------------------------------------------------------------------------
# oscillating averages


@dataclass
class OscillationRow:
    epsilon: float
    error: float
    ratio: float  # error / previous error; nan for the first row


def _subcell_integrals(probe, eps, m):
    """G[a, b] = sum over periodic copies of the integral of g on raster subcell (a, b)."""
    n = cells_per_side(eps)
    size = 1.0 / (n * m)
    xq = 0.5 * (_GL_X + 1.0) * size
    wq = 0.5 * _GL_W * size
    G = np.zeros((m, m))
    starts = np.arange(n * m) * size
    X = (starts[:, None] + xq[None, :]).ravel()
    # integrals on every subcell of the full grid, shape (n m, n m)
    g = probe(X[:, None], X[None, :])
    g = np.broadcast_to(g, (X.size, X.size)).reshape(n * m, xq.size, n * m, xq.size)
    cellint = np.einsum("iajb,a,b->ij", g, wq, wq)
    for a in range(m):
        for b in range(m):
            G[a, b] = math.fsum(cellint[a::m, b::m].ravel())
    return G


def oscillating_average_test(raster: CellRaster, eps_list, probe) -> list:
    """Table of |int chi_c(x/eps) g dx - chi_c* int g dx| per eps.

    Integrals are exact on each raster subcell up to 8-point Gauss-Legendre
    accuracy in each direction and accumulated with math.fsum; for g = 1 and
    a power-of-two raster the error is exactly zero.
    """
    rows = []
    chi = raster.values.astype(bool)
    frac = volume_fraction(raster)
    prev = None
    for eps in eps_list:
        G = _subcell_integrals(probe, eps, raster.m)
        i1 = math.fsum(G[chi].ravel())
        i0 = math.fsum(G.ravel())
        err = abs(i1 - frac * i0)
        rows.append(OscillationRow(float(eps), err, err / prev if prev else float("nan")))
        prev = err
    return rows


def gaussian_probe(center=(0.3, 0.6), width=0.35):
    """Smooth, off-centre probe; its boundary flux makes the O(eps) term visible."""
    cx, cy = center

    def g(x, y):
        return np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * width ** 2))
    return g


# --------------------------------------------------------------------------
# time-step self-convergence


@dataclass
class SelfConvergenceReport:
    h_list: list
    diffs: dict        # field -> [|u_h - u_{h/2}|, |u_{h/2} - u_{h/4}|, ...]
    errors_vs_finest: dict
    orders: dict       # field -> observed order from successive differences

    def order(self, name: str = "p") -> float:
        return self.orders[name]


def timestep_self_convergence(provider, cfg: TimeStepConfig, h_list, final_time: float,
                              initial=(-0.2, 1.0)) -> SelfConvergenceReport:
    """Observed order from three successively halved steps at a common final time.

    Order = log2(|u_h - u_{h/2}| / |u_{h/2} - u_{h/4}|) in the L2 norm of the
    final state; differences against the finest run are reported as well.
    """
    h_list = [float(h) for h in h_list]
    if len(h_list) < 3:
        raise ConfigurationError("self-convergence needs at least three step sizes")
    for a, b in zip(h_list, h_list[1:]):
        if abs(a / b - 2.0) > 1e-12:
            raise ConfigurationError("step sizes must halve successively")
    finals = []
    for h in h_list:
        n = int(round(final_time / h))
        if abs(n * h - final_time) > 1e-9 * final_time:
            raise ConfigurationError(f"h={h} does not divide the final time {final_time}")
        step = TimeStepConfig(h=h, tol_p=cfg.tol_p, max_iter=cfg.max_iter, linear_rel_tol=cfg.linear_rel_tol,
                              damping=cfg.damping, peclet_limit=cfg.peclet_limit,
                              kirchhoff_cells=cfg.kirchhoff_cells)
        tr = run_simulation(initial, provider, step, n)
        finals.append({"p": tr.p[-1], "theta": tr.theta[-1], "r": tr.r[-1]})
    M = assemble_consistent_mass(provider.grid).matrix

    def norm(v):
        return float(np.sqrt(max(v @ (M @ v), 0.0)))

    diffs, errs, orders = {}, {}, {}
    for key in ("p", "theta", "r"):
        diffs[key] = [norm(a[key] - b[key]) for a, b in zip(finals, finals[1:])]
        errs[key] = [norm(a[key] - finals[-1][key]) for a in finals[:-1]]
        d = diffs[key]
        orders[key] = float(np.log2(d[-2] / d[-1])) if d[-1] > 0 and d[-2] > 0 else float("nan")
    return SelfConvergenceReport(h_list, diffs, errs, orders)
