"""
Constitutive laws, material constants, assumption checks and the Kirchhoff map.

All callables are vectorised over numpy arrays.  The default law set uses
toy magnitudes (unit-square domain, O(1) time scales); it is built so that
each factor maps onto one of the structural bounds, which makes the sampled
assumption checks meaningful, but it is not calibrated to any concrete.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import AssumptionViolation, ExtrapolationError

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


@dataclass(frozen=True)
class PhysicalConstants:
    rho_w: float = 1.0       # water density [kg/m3]
    c_w: float = 1.0         # water heat capacity [J/(kg K)]
    rho_sc: float = 2.0      # cement skeleton density
    c_sc: float = 1.0
    rho_sa: float = 2.5      # aggregate skeleton density
    c_sa: float = 1.0
    alpha_e: float = 1.0     # heat film coefficient
    beta_e: float = 1.0      # moisture exchange coefficient
    alpha1: float = -0.5     # water consumption by hydration
    alpha2: float = 1.0      # heat of hydration
    p_inf: float = -1.0      # ambient (fictitious) pressure [Pa]
    theta_inf: float = 1.0   # ambient temperature [K]

    def replace(self, **changes) -> "PhysicalConstants":
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# law families


@dataclass(frozen=True)
class BlendedSaturation:
    """van Genuchten curve blended with a logistic tail.

    The logistic part keeps S' strictly positive on the whole real line
    (plain van Genuchten is flat for p >= 0).
    """

    c_s: float = 1.0
    s_r: float = 0.1
    alpha: float = 2.0
    n: float = 2.0
    blend: float = 0.05
    tail_width: float = 1.0

    def _vg(self, p):
        m = 1.0 - 1.0 / self.n
        x = self.alpha * np.maximum(-p, 0.0)
        xn = x ** self.n
        se = (1.0 + xn) ** (-m)
        dse = m * self.n * self.alpha * x ** (self.n - 1.0) * (1.0 + xn) ** (-m - 1.0)
        return se, dse

    def _logistic(self, p):
        s = 0.5 * (1.0 + np.tanh(0.5 * p / self.tail_width))
        return s, s * (1.0 - s) / self.tail_width

    def __call__(self, p):
        p = np.asarray(p, dtype=float)
        se, _ = self._vg(p)
        lg, _ = self._logistic(p)
        return self.s_r + (self.c_s - self.s_r) * ((1.0 - self.blend) * se + self.blend * lg)

    def derivative(self, p):
        p = np.asarray(p, dtype=float)
        _, dse = self._vg(p)
        _, dlg = self._logistic(p)
        return (self.c_s - self.s_r) * ((1.0 - self.blend) * dse + self.blend * dlg)


@dataclass(frozen=True)
class PowerRelativePermeability:
    """k_R(s) = floor + (1 - floor) (s / c_s)^eta, strictly increasing on [0, c_s]."""

    eta: float = 3.0
    floor: float = 1e-2
    c_s: float = 1.0

    def __call__(self, s):
        s = np.clip(np.asarray(s, dtype=float), 0.0, None) / self.c_s
        return self.floor + (1.0 - self.floor) * s ** self.eta


@dataclass(frozen=True)
class ExponentialDecay:
    """v(r) = low + (high - low) exp(-rate * max(r, 0)); bounded, Lipschitz."""

    low: float
    high: float
    rate: float = 1.0

    def __call__(self, r):
        r = np.maximum(np.asarray(r, dtype=float), 0.0)
        return self.low + (self.high - self.low) * np.exp(-self.rate * r)

    @property
    def lipschitz(self) -> float:
        return abs(self.high - self.low) * self.rate


@dataclass(frozen=True)
class ClippedLinearViscosity:
    """mu(theta) = clip(mu_ref (1 - slope (theta - theta_ref)), mu1, mu2)."""

    mu_ref: float = 1.0
    slope: float = 0.2
    theta_ref: float = 1.0
    mu1: float = 0.5
    mu2: float = 2.0

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.clip(self.mu_ref * (1.0 - self.slope * (theta - self.theta_ref)), self.mu1, self.mu2)


@dataclass(frozen=True)
class CementConductivity:
    """lambda_c(p, theta, r) = base + sat S(p) + hyd (1 - exp(-max(r, 0)))."""

    saturation: Callable = field(repr=False)
    base: float = 0.10
    sat: float = 0.05
    hyd: float = 0.05

    def __call__(self, p, theta, r):
        s = self.saturation(p)
        r = np.maximum(np.asarray(r, dtype=float), 0.0)
        out = self.base + self.sat * s + self.hyd * (1.0 - np.exp(-r))
        return np.broadcast_to(out, np.broadcast(np.asarray(p), np.asarray(theta), r).shape) * 1.0


@dataclass(frozen=True)
class AggregateConductivity:
    """lambda_a(p, theta) = base + sat S(p)."""

    saturation: Callable = field(repr=False)
    base: float = 0.20
    sat: float = 0.02

    def __call__(self, p, theta):
        out = self.base + self.sat * self.saturation(p)
        return np.broadcast_to(out, np.broadcast(np.asarray(p), np.asarray(theta)).shape) * 1.0


def smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


@dataclass(frozen=True)
class HydrationRate:
    """f = c_f * g1(p) * g2(theta) * (1 - r/r_max)_+.

    g1 is a C1 ramp vanishing identically for p <= p_inf, g2 a logistic
    activation in theta.  Every factor lies in [0, 1], so 0 <= f <= c_f.
    """

    c_f: float = 0.5
    p_inf: float = -1.0
    ramp_width: float = 0.5
    theta_act: float = 0.5
    theta_width: float = 0.25
    r_max: float = 1.0

    def __call__(self, p, theta, r):
        p = np.asarray(p, dtype=float)
        g1 = smoothstep((p - self.p_inf) / self.ramp_width)
        g2 = 0.5 * (1.0 + np.tanh(0.5 * (np.asarray(theta, dtype=float) - self.theta_act) / self.theta_width))
        g3 = np.maximum(1.0 - np.maximum(np.asarray(r, dtype=float), 0.0) / self.r_max, 0.0)
        out = self.c_f * g1 * g2 * g3
        return np.where(p <= self.p_inf, 0.0, out)


@dataclass(frozen=True)
class ConstantHydration:
    """f = c_f wherever p > p_inf, zero otherwise."""

    c_f: float
    p_inf: float

    def __call__(self, p, theta, r):
        p = np.asarray(p, dtype=float)
        shape = np.broadcast(p, np.asarray(theta), np.asarray(r)).shape
        return np.broadcast_to(np.where(p > self.p_inf, self.c_f, 0.0), shape) * 1.0


@dataclass(frozen=True)
class LawBounds:
    """Constants declared alongside the laws; validation checks them by sampling."""

    c_s: float
    s_l: float
    k1: float
    k2: float
    mu1: float
    mu2: float
    lam1: float
    lam2: float
    c_phi: float
    phi1: float
    phi2: float
    c_f: float


@dataclass(frozen=True)
class MaterialLaws:
    saturation: Callable
    saturation_prime: Callable
    k_rel: Callable
    k_c: Callable
    k_a: float
    mu: Callable
    lambda_c: Callable
    lambda_a: Callable
    phi_c: Callable
    phi_a: float
    hydration: Callable
    bounds: LawBounds

    def replace(self, **changes) -> "MaterialLaws":
        return dataclasses.replace(self, **changes)


DEFAULT_LAW_PARAMS = {
    "saturation": {"c_s": 1.0, "s_r": 0.1, "alpha": 2.0, "n": 2.0, "blend": 0.05, "tail_width": 1.0},
    "relative_permeability": {"eta": 3.0, "floor": 1e-2},
    "k_c": {"low": 0.01, "high": 0.04, "rate": 1.0},
    "k_a": 0.02,
    "viscosity": {"mu_ref": 1.0, "slope": 0.2, "theta_ref": 1.0, "mu1": 0.5, "mu2": 2.0},
    "lambda_c": {"base": 0.10, "sat": 0.05, "hyd": 0.05},
    "lambda_a": {"base": 0.20, "sat": 0.02},
    "phi_c": {"low": 0.25, "high": 0.35, "rate": 1.0},
    "phi_a": 0.1,
    "hydration": {"c_f": 0.5, "ramp_width": 0.5, "theta_act": 0.5, "theta_width": 0.25, "r_max": 1.0},
}


def _merge(base, override):
    out = dict(base)
    for key, val in (override or {}).items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def build_laws(params: dict | None, constants: PhysicalConstants) -> MaterialLaws:
    """Instantiate the default law families, overriding any given parameters.

    Declared bounds (c_s, s_l, k1, ...) follow from the family parameters;
    ``params["bounds"]`` may override any of them (which is how a config can
    declare a bound that the laws then fail to respect).
    """
    prm = _merge(DEFAULT_LAW_PARAMS, params)
    sat = BlendedSaturation(**prm["saturation"])
    krel = PowerRelativePermeability(c_s=sat.c_s, **prm["relative_permeability"])
    k_c = ExponentialDecay(**prm["k_c"])
    visc = ClippedLinearViscosity(**prm["viscosity"])
    lam_c = CementConductivity(sat, **prm["lambda_c"])
    lam_a = AggregateConductivity(sat, **prm["lambda_a"])
    phi_c = ExponentialDecay(**prm["phi_c"])
    hyd = HydrationRate(p_inf=constants.p_inf, **prm["hydration"])

    # slope bound of S: sampled maximum with a small safety factor
    grid = np.linspace(-50.0, 50.0, 200001)
    s_l = 1.001 * float(np.max(sat.derivative(grid)))
    lam_lo = min(lam_c.base, lam_a.base)
    lam_hi = max(lam_c.base + lam_c.sat * sat.c_s + lam_c.hyd, lam_a.base + lam_a.sat * sat.c_s)
    bounds = dict(
        c_s=sat.c_s, s_l=s_l,
        k1=min(k_c.low, k_c.high), k2=max(k_c.low, k_c.high),
        mu1=visc.mu1, mu2=visc.mu2,
        lam1=0.99 * lam_lo, lam2=1.01 * lam_hi,
        c_phi=max(phi_c.lipschitz, 1e-12),
        phi1=min(phi_c.low, phi_c.high), phi2=max(phi_c.low, phi_c.high),
        c_f=hyd.c_f,
    )
    bounds.update(prm.get("bounds", {}))
    return MaterialLaws(
        saturation=sat, saturation_prime=sat.derivative, k_rel=krel, k_c=k_c,
        k_a=float(prm["k_a"]), mu=visc, lambda_c=lam_c, lambda_a=lam_a,
        phi_c=phi_c, phi_a=float(prm["phi_a"]), hydration=hyd,
        bounds=LawBounds(**bounds),
    )


def default_laws(constants: PhysicalConstants | None = None) -> MaterialLaws:
    return build_laws(None, constants or PhysicalConstants())


# --------------------------------------------------------------------------
# per-phase coefficient evaluation


def _chi(phase):
    if isinstance(phase, str):
        if phase not in ("a", "c"):
            raise ValueError(f"phase must be 'a' or 'c', got {phase!r}")
        return 1.0 if phase == "c" else 0.0
    return np.asarray(phase, dtype=float)


def eval_b(phase, p, r, laws: MaterialLaws, constants: PhysicalConstants):
    """Moisture content rho_w [chi_c phi_c(r) + chi_a phi_a] S(p)."""
    chi = _chi(phase)
    return constants.rho_w * (chi * laws.phi_c(r) + (1.0 - chi) * laws.phi_a) * laws.saturation(p)


def eval_sigma(phase, r, laws: MaterialLaws, constants: PhysicalConstants):
    """Volumetric heat capacity of the solid skeleton."""
    chi = _chi(phase)
    cem = constants.rho_sc * constants.c_sc * (1.0 - laws.phi_c(r))
    agg = constants.rho_sa * constants.c_sa * (1.0 - laws.phi_a)
    return chi * cem + (1.0 - chi) * agg


def eval_a(phase, p, theta, r, laws: MaterialLaws, constants: PhysicalConstants):
    """Moisture mobility rho_w k_R(S(p)) / mu(theta) * (k_c(r) or k_a)."""
    chi = _chi(phase)
    intrinsic = chi * laws.k_c(r) + (1.0 - chi) * laws.k_a
    return constants.rho_w * laws.k_rel(laws.saturation(p)) / laws.mu(theta) * intrinsic


def eval_lambda(phase, p, theta, r, laws: MaterialLaws):
    chi = _chi(phase)
    return chi * laws.lambda_c(p, theta, r) + (1.0 - chi) * laws.lambda_a(p, theta)


# --------------------------------------------------------------------------
# energy potential


def eval_theta_potential(saturation_prime: Callable, p, panels: int = 32):
    """Theta(xi) = int_0^xi S'(z) z dz by composite 8-point Gauss-Legendre.

    ``saturation_prime`` may be a MaterialLaws instance or the derivative itself.
    """
    if isinstance(saturation_prime, MaterialLaws):
        saturation_prime = saturation_prime.saturation_prime
    p = np.asarray(p, dtype=float)
    flat = p.ravel()
    # substitute z = s * xi, s in [0, 1]: Theta = xi^2 int_0^1 s S'(s xi) ds
    edges = np.linspace(0.0, 1.0, panels + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * (edges[1:] - edges[:-1])
    s = (mid[:, None] + half[:, None] * _GL_NODES[None, :]).ravel()
    w = (half[:, None] * _GL_WEIGHTS[None, :]).ravel()
    z = flat[:, None] * s[None, :]
    vals = saturation_prime(z) * s[None, :]
    out = flat ** 2 * (vals @ w)
    return out.reshape(p.shape)


# --------------------------------------------------------------------------
# Kirchhoff transformation


class KirchhoffMap:
    """Truncated permeability k~_r, its primitive kappa and the inverse map.

    kappa is tabulated at uniform nodes of ``[p_inf - margin, margin]`` (p_inf
    and 0 are nodes) with 8-point Gauss-Legendre per table cell; forward
    evaluation adds the exact partial-cell integral, the inverse brackets by
    binary search and polishes with safeguarded Newton steps.
    """

    def __init__(self, laws: MaterialLaws, p_inf: float, cells_per_unit: int = 512,
                 margin: float | None = None):
        if not p_inf < 0.0:
            raise ValueError("p_inf must be negative")
        self.laws = laws
        self.p_inf = float(p_inf)
        self.K0 = float(laws.k_rel(laws.saturation(self.p_inf)))
        self.K1 = float(laws.k_rel(laws.bounds.c_s))
        span = -self.p_inf
        margin = 0.25 * span if margin is None else margin
        n_main = max(int(np.ceil(cells_per_unit * span)), 16)
        d = span / n_main
        n_lo = int(np.ceil(margin / d))
        self.step = d
        self.nodes = self.p_inf + d * np.arange(-n_lo, n_main + n_lo + 1)
        self.nodes[n_lo] = self.p_inf
        self.nodes[n_lo + n_main] = 0.0
        self._zero = n_lo + n_main
        cell = self._segment(self.nodes[:-1], self.nodes[1:])
        cum = np.concatenate([[0.0], np.cumsum(cell)])
        self.values = cum - cum[self._zero]
        self.lo, self.hi = self.nodes[0], self.nodes[-1]
        self.u_lo, self.u_hi = self.values[0], self.values[-1]

    def k_tilde(self, xi):
        xi = np.asarray(xi, dtype=float)
        return np.where(xi > self.p_inf, self.laws.k_rel(self.laws.saturation(xi)), self.K0)

    def _segment(self, a, b):
        mid = 0.5 * (a + b)
        half = 0.5 * (b - a)
        pts = mid[..., None] + half[..., None] * _GL_NODES
        return half * (self.k_tilde(pts) @ _GL_WEIGHTS)

    def _locate(self, p):
        j = np.floor((p - self.lo) / self.step).astype(int)
        return np.clip(j, 0, self.nodes.size - 2)

    def forward(self, p):
        p = np.asarray(p, dtype=float)
        if np.any(p < self.lo - 1e-12 * abs(self.lo)) or np.any(p > self.hi + 1e-12 * abs(self.lo)):
            raise ExtrapolationError(f"pressure outside Kirchhoff table [{self.lo}, {self.hi}]")
        j = self._locate(p)
        return self.values[j] + self._segment(self.nodes[j], p)

    def inverse(self, u, newton_steps: int = 4):
        u = np.asarray(u, dtype=float)
        tol = 1e-12 * max(abs(self.u_lo), 1.0)
        if np.any(u < self.u_lo - tol) or np.any(u > self.u_hi + tol):
            raise ExtrapolationError(f"Kirchhoff variable outside table [{self.u_lo}, {self.u_hi}]")
        j = np.clip(np.searchsorted(self.values, u, side="right") - 1, 0, self.nodes.size - 2)
        a, b = self.nodes[j], self.nodes[j + 1]
        ua, ub = self.values[j], self.values[j + 1]
        p = a + (u - ua) * (b - a) / (ub - ua)
        for _ in range(newton_steps):
            res = self.values[j] + self._segment(a, p) - u
            p = np.clip(p - res / self.k_tilde(p), a, b)
        return p

    def derivative_inverse(self, u):
        """d kappa^{-1} / du = 1 / k~_r(kappa^{-1}(u))."""
        return 1.0 / self.k_tilde(self.inverse(u))

    def clip_u(self, u):
        return np.clip(u, self.u_lo, self.u_hi)


def kirchhoff_forward(kmap: KirchhoffMap, p):
    return kmap.forward(p)


def kirchhoff_inverse(kmap: KirchhoffMap, u):
    return kmap.inverse(u)


# --------------------------------------------------------------------------
# assumption validation


@dataclass
class CheckResult:
    name: str
    assumption: str
    passed: bool
    margin: float

    def __str__(self):
        flag = "ok  " if self.passed else "FAIL"
        return f"[{flag}] ({self.assumption}) {self.name}: worst margin {self.margin:.3e}"


@dataclass
class ValidationReport:
    checks: list[CheckResult]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def __str__(self):
        return "\n".join(str(c) for c in self.checks)


def validate_assumptions(laws: MaterialLaws, constants: PhysicalConstants, n_samples: int = 1000,
                         raise_on_failure: bool = True) -> ValidationReport:
    """Sampled checks of the structural hypotheses (i)-(v).

    Bounds and monotonicity are checked on finite samples only, so a pass is
    necessary, not sufficient.  Margins are positive when a check holds.
    """
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100")
    b = laws.bounds
    c = constants
    checks: list[CheckResult] = []

    def add(name, assumption, margin, strict=False):
        margin = float(np.min(margin)) if np.size(margin) else float("inf")
        passed = margin > 0.0 if strict else margin >= 0.0
        checks.append(CheckResult(name, assumption, bool(passed), margin))

    span = abs(c.p_inf) if c.p_inf != 0 else 1.0
    p = np.unique(np.concatenate([
        np.linspace(-20.0 * span, 20.0 * span, n_samples),
        np.linspace(min(c.p_inf, 0.0), max(c.p_inf, 0.0), n_samples),
    ]))
    theta = np.linspace(-2.0 * abs(c.theta_inf) - 1.0, 4.0 * abs(c.theta_inf) + 1.0, n_samples)
    r = np.linspace(-1.0, 10.0 * max(b.c_f, 1.0), n_samples)
    rng = np.random.default_rng(12345)
    P, TH, R = (rng.choice(v, size=4 * n_samples) for v in (p, theta, r))

    # (i)
    s = laws.saturation(p)
    ds = laws.saturation_prime(p)
    add("S > 0", "i", s, strict=True)
    add("S <= C_s", "i", b.c_s - s)
    add("S' > 0", "i", ds, strict=True)
    add("S' <= S_L", "i", b.s_l - ds)
    add("S nondecreasing", "i", np.diff(s))
    h = 1e-6 * span
    fd = (laws.saturation(p + h) - laws.saturation(p - h)) / (2 * h)
    add("S' consistent with S", "i", 1e-5 * (1.0 + np.abs(ds)) - np.abs(fd - ds))

    # (ii)
    kc = laws.k_c(r)
    add("k1 > 0", "ii", b.k1, strict=True)
    add("k1 <= k_c", "ii", kc - b.k1)
    add("k_c <= k2", "ii", b.k2 - kc)
    add("k_a > 0", "ii", laws.k_a, strict=True)
    sg = np.linspace(0.0, b.c_s, n_samples)
    kr = laws.k_rel(sg)
    add("k_R > 0 on [0, C_s]", "ii", kr, strict=True)
    add("k_R strictly increasing", "ii", np.diff(kr), strict=True)
    mu = laws.mu(theta)
    add("mu1 > 0", "ii", b.mu1, strict=True)
    add("mu1 <= mu", "ii", mu - b.mu1)
    add("mu <= mu2", "ii", b.mu2 - mu)
    lc = laws.lambda_c(P, TH, R)
    la = laws.lambda_a(P, TH)
    add("lambda1 > 0", "ii", b.lam1, strict=True)
    add("lambda1 < lambda_c < lambda2", "ii", np.minimum(lc - b.lam1, b.lam2 - lc), strict=True)
    add("lambda1 < lambda_a < lambda2", "ii", np.minimum(la - b.lam1, b.lam2 - la), strict=True)

    # (iii)
    ph = laws.phi_c(r)
    add("phi1 > 0", "iii", b.phi1, strict=True)
    add("phi1 <= phi_c <= phi2", "iii", np.minimum(ph - b.phi1, b.phi2 - ph))
    slopes = np.abs(np.diff(ph)) / np.diff(r)
    add("phi_c Lipschitz with C_phi", "iii", b.c_phi * (1.0 + 1e-9) - slopes)
    add("C_phi > 0", "iii", b.c_phi, strict=True)

    # (iv)
    f = laws.hydration(P, TH, R)
    add("0 <= f", "iv", f)
    add("f <= C_f", "iv", b.c_f - f)
    below = np.linspace(c.p_inf - 20.0 * span, c.p_inf, n_samples)
    fb = laws.hydration(below, rng.choice(theta, n_samples), rng.choice(r, n_samples))
    add("f = 0 for p <= p_inf", "iv", -np.abs(fb))

    # (v)
    add("alpha_e > 0", "v", c.alpha_e, strict=True)
    add("beta_e > 0", "v", c.beta_e, strict=True)
    add("alpha1 < 0", "v", -c.alpha1, strict=True)
    add("alpha2 > 0", "v", c.alpha2, strict=True)
    add("p_inf < 0", "v", -c.p_inf, strict=True)
    add("theta_inf > 0", "v", c.theta_inf, strict=True)
    add("alpha1 + rho_w C_phi C_s < 0", "v", -(c.alpha1 + c.rho_w * b.c_phi * b.c_s), strict=True)

    # heat capacity positivity is needed by the time stepper, not by (i)-(v)
    cap = np.concatenate([eval_sigma("c", r, laws, c), np.atleast_1d(eval_sigma("a", 0.0, laws, c))])
    add("skeleton heat capacity > 0", "scheme", cap, strict=True)

    report = ValidationReport(checks)
    if raise_on_failure and not report.ok:
        raise AssumptionViolation(report)
    return report
