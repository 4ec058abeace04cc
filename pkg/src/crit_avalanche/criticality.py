"""Critical surface, exponent scans, amplitudes and percolation criteria."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import dynamics, oracles
from .fixedpoint import c_rho, q_infinity
from .measures import Measure, MeasureError, mass, mix, summary
from .survival import DEFAULT_NODES, chi_quadrature, expect_shifted, psi, z_of_rho

CRITICAL_TOL = 1e-4


@dataclass(frozen=True)
class MixtureFamily:
    """rho_alpha = (1 - alpha) rho0 + alpha rho1."""

    rho0: Measure
    rho1: Measure
    b: int

    def member(self, alpha: float) -> Measure:
        return mix(self.rho0, self.rho1, alpha)


@dataclass(frozen=True)
class ScalingFit:
    """Power law y = amplitude * x^exponent fitted on log-log pairs inside ``window``."""

    exponent: float
    amplitude: float
    stderr: float
    window: tuple
    r2: float
    amplitude_nominal: float | None = None  # amplitude with the exponent pinned to its mean-field value
    amplitude_stderr: float | None = None
    points: int = 0
    stderr_kind: str = "ols"  # "batch_means" when the points are correlated Monte Carlo estimates


def fit_power_law(x, y, window=None, weights=None) -> ScalingFit:
    """Least squares of log y on log x (weighted when ``weights`` are given)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = (x > 0) & (y > 0)
    if window is not None:
        keep &= (x >= window[0]) & (x <= window[1])
    x, y = x[keep], y[keep]
    w = None if weights is None else np.asarray(weights, dtype=float)[keep]
    if x.size < 3:
        raise MeasureError(f"a power-law fit needs at least 3 points, got {x.size}")
    X = np.column_stack([np.ones(x.size), np.log(x)])
    coef, se, r2 = _lstsq(X, np.log(y), w)
    win = (float(x.min()), float(x.max())) if window is None else tuple(window)
    return ScalingFit(float(coef[1]), float(math.exp(coef[0])), float(se[1]), win, r2, points=int(x.size))


def _lstsq(X, t, w=None):
    """Coefficients, standard errors and R^2 of a (weighted) linear least-squares fit."""
    sw = np.ones(t.size) if w is None else np.sqrt(w)
    Xw, tw = X * sw[:, None], t * sw
    coef, *_ = np.linalg.lstsq(Xw, tw, rcond=None)
    resid = tw - Xw @ coef
    dof = max(t.size - X.shape[1], 1)
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * np.linalg.inv(Xw.T @ Xw)
    tbar = np.average(t, weights=None if w is None else w)
    ss_tot = float(np.sum(sw**2 * (t - tbar) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return coef, np.sqrt(np.diag(cov)), min(max(r2, 0.0), 1.0)


# ---------------------------------------------------------------------------
# critical point


def find_critical_alpha(family: MixtureFamily, tol: float = 1e-9, nodes: int = DEFAULT_NODES) -> float:
    """alpha with z(rho_alpha) = 1/b, by bracketing root search on alpha."""
    zc = 1.0 / family.b

    def f(a):
        return z_of_rho(family.member(a), family.b, nodes=nodes).z - zc

    f0, f1 = f(0.0), f(1.0)
    if f0 * f1 > 0:
        raise MeasureError(f"z does not straddle 1/b: z(rho0) = {f0 + zc:.6g}, z(rho1) = {f1 + zc:.6g}")
    if f0 == 0:
        return 0.0
    if f1 == 0:
        return 1.0
    alpha = optimize.brentq(f, 0.0, 1.0, xtol=1e-14)
    if abs(f(alpha)) >= tol:
        # fall back to plain bisection on the sign change
        lo, hi = (0.0, 1.0) if f0 < 0 else (1.0, 0.0)
        for _ in range(200):
            alpha = 0.5 * (lo + hi)
            v = f(alpha)
            if abs(v) < tol:
                break
            lo, hi = (alpha, hi) if v < 0 else (lo, alpha)
    return float(alpha)


# ---------------------------------------------------------------------------
# amplitudes


@dataclass(frozen=True)
class Amplitudes:
    tau: float
    theta: float
    tee: float
    c: float
    e_psi: float  # E psi(X + v)


def expected_psi(measure: Measure, b: int, v: float, nodes: int = DEFAULT_NODES):
    s = summary(measure, b)
    prof = psi(measure, b, theta_hi=max(s.theta_b, s.x_star + v), nodes=nodes)
    return expect_shifted(measure, prof, v, below=0.0), prof


def amplitudes(measure: Measure, b: int, v: float, nodes: int = DEFAULT_NODES, tol: float = CRITICAL_TOL) -> Amplitudes:
    """tau = E psi(X+v)/b; Theta = c E psi(X+v) / ((b-1)^(1/2) sqrt(pi)); T = b c^2 E psi(X+v).

    Theta, T and c are NaN unless |z - 1/b| < tol.
    """
    e_psi, prof = expected_psi(measure, b, v, nodes)
    tau = e_psi / b
    z = z_of_rho(measure, b, nodes=nodes).z
    if abs(z - 1.0 / b) >= tol:
        return Amplitudes(tau, math.nan, math.nan, math.nan, e_psi)
    c = c_rho(measure, b, q_infinity(measure, b, nodes=nodes), prof)
    theta = c * e_psi / (math.sqrt(b - 1) * math.sqrt(math.pi))
    return Amplitudes(tau, theta, b * c * c * e_psi, c, e_psi)


# ---------------------------------------------------------------------------
# scans


@dataclass(frozen=True)
class GammaScan:
    fit: ScalingFit
    tau_empirical: float
    tau_formula: float
    alphas: np.ndarray
    z: np.ndarray
    chi: np.ndarray
    b: int = 2

    @property
    def product(self) -> np.ndarray:
        """chi (z_c - z), which tends to tau."""
        return self.chi * (1.0 / self.b - self.z)


def gamma_scan(
    family: MixtureFamily, v: float, alphas, nodes: int = DEFAULT_NODES, alpha_star: float | None = None
) -> GammaScan:
    """Fit chi ~ (z_c - z)^(-gamma) along subcritical family members."""
    alphas = np.asarray(list(alphas), dtype=float)
    if alphas.size < 3:
        raise MeasureError("gamma scan needs at least 3 alphas")
    b = family.b
    zc = 1.0 / b
    zs, chis = [], []
    for a in alphas:
        m = family.member(float(a))
        z = z_of_rho(m, b, nodes=nodes).z
        if z >= zc:
            raise MeasureError(f"alpha={a} is not subcritical (z={z:.6g})")
        zs.append(z)
        chis.append(chi_quadrature(m, b, v, nodes=nodes))
    zs, chis = np.array(zs), np.array(chis)
    fit = fit_power_law(zc - zs, chis)
    tau_emp = float(np.mean(chis * (zc - zs)))
    if alpha_star is None:
        alpha_star = find_critical_alpha(family, nodes=nodes)
    tau_formula = amplitudes(family.member(alpha_star), b, v, nodes).tau
    return GammaScan(fit, tau_emp, tau_formula, alphas, zs, chis, b)


def gap_parameters(measure: Measure, b: int, v: float) -> tuple[float, float] | None:
    """(p, root toppling probability) when the avalanche is exactly a binomial(b, p) cluster."""
    s = summary(measure, b)
    top = max(s.theta_b, s.x_star + v)
    g_lo = mass(measure, min(max(1.0 - 1.0 / b, 0.0), 1.0), 1.0)
    g_hi = mass(measure, min(max(1.0 - top / b, 0.0), 1.0), 1.0)
    if abs(g_hi - g_lo) > 1e-12:
        return None
    return g_lo, mass(measure, min(max(1.0 - v, 0.0), 1.0), 1.0)


@dataclass(frozen=True)
class DeltaScan:
    fit: ScalingFit
    theta_formula: float
    oracle_ratio: float | None  # fitted amplitude / exact Otter-Dwass amplitude
    oracle_amplitude: float | None
    formula_ratio: float | None  # theta_formula / Otter-Dwass amplitude
    tail: dynamics.TailTable = field(repr=False, default=None)


def delta_scan(
    measure: Measure,
    b: int,
    v: float,
    samples: int,
    seed: int,
    n_lo: int = 100,
    n_hi: int = 10_000,
    points: int = 40,
    workers: int | None = None,
    nodes: int = DEFAULT_NODES,
    batches: int = 10,
) -> DeltaScan:
    """Fit P(|A| >= n) ~ n^(-1/delta) at a critical measure.

    Tail points at different n share samples, so the OLS error understates the
    uncertainty; the reported stderr comes from refitting ``batches``
    interleaved sub-samples (batch means).
    """
    z = z_of_rho(measure, b, nodes=nodes).z
    if abs(z - 1.0 / b) >= CRITICAL_TOL:
        raise MeasureError(f"delta scan needs a critical measure; z = {z:.6g}, 1/b = {1.0 / b:.6g}")
    s = summary(measure, b)
    if not v > 1.0 - s.x_star:
        raise MeasureError(f"v must exceed 1 - x_star = {1.0 - s.x_star:.6g}")
    # a size cap of n_hi keeps P(size >= n) exact for every n <= n_hi
    rows = dynamics.simulate_many(measure, b, v, samples, n_hi + 1, seed, workers, n_hi)
    sizes = rows[:, 0]
    tail = dynamics.tail_from_sizes(sizes, (rows[:, 2] | rows[:, 3]).astype(bool))
    ns = np.unique(np.round(np.geomspace(n_lo, n_hi, points)).astype(int))
    ns = ns[ns <= tail.n.size]
    fit = fit_power_law(ns, tail.p_ge_n[ns - 1], window=(n_lo, n_hi))
    if batches >= 2 and samples >= 100 * batches:
        ex = []
        for k in range(batches):
            sub = np.sort(sizes[k::batches])
            p_sub = 1.0 - np.searchsorted(sub, ns, "left") / sub.size
            ex.append(fit_power_law(ns, p_sub, window=(n_lo, n_hi)).exponent)
        se = float(np.std(ex, ddof=1) / math.sqrt(batches))
        fit = dataclasses.replace(fit, stderr=se, stderr_kind="batch_means")
    amp = amplitudes(measure, b, v, nodes)
    gp = gap_parameters(measure, b, v)
    if gp is not None:
        od = gp[1] * oracles.otter_dwass_amplitude(b)
        return DeltaScan(fit, amp.theta, fit.amplitude / od, od, amp.theta / od, tail)
    return DeltaScan(fit, amp.theta, None, None, None, tail)


@dataclass(frozen=True)
class BetaScan:
    fit: ScalingFit
    tee_formula: float
    oracle_slope: float | None
    alphas: np.ndarray
    z: np.ndarray
    survival: np.ndarray
    stderr: np.ndarray

    @property
    def oracle_ratio(self) -> float | None:
        """Nominal-exponent amplitude / branching-process slope."""
        if self.oracle_slope is None:
            return None
        return self.fit.amplitude_nominal / self.oracle_slope

    @property
    def formula_ratio(self) -> float | None:
        if self.oracle_slope is None:
            return None
        return self.tee_formula / self.oracle_slope


def fit_supercritical(eps, surv, se, nominal: float = 1.0) -> ScalingFit:
    """Exponent and amplitude of P ~ A eps^beta with a first-order correction.

    The exponent comes from weighted least squares of log P on (1, log eps, eps);
    the amplitude at the nominal exponent from log(P / eps^nominal) on (1, eps),
    i.e. the eps -> 0 extrapolation.  Weights are inverse variances of log P.
    """
    eps, surv, se = (np.asarray(a, dtype=float) for a in (eps, surv, se))
    keep = (surv > 0) & (eps > 0)
    eps, surv, se = eps[keep], surv[keep], se[keep]
    if eps.size < 4:
        raise MeasureError(f"supercritical fit needs at least 4 points with positive survival, got {eps.size}")
    w = (surv / np.maximum(se, 1e-300)) ** 2
    t = np.log(surv)
    X = np.column_stack([np.ones(eps.size), np.log(eps), eps])
    coef, err, r2 = _lstsq(X, t, w)
    X2 = np.column_stack([np.ones(eps.size), eps])
    coef2, err2, _ = _lstsq(X2, t - nominal * np.log(eps), w)
    a_nom = math.exp(coef2[0])
    return ScalingFit(
        float(coef[1]), float(math.exp(coef[0])), float(err[1]), (float(eps.min()), float(eps.max())), r2,
        amplitude_nominal=a_nom, amplitude_stderr=float(a_nom * err2[0]), points=int(eps.size),
    )


def beta_scan(
    family: MixtureFamily,
    v: float,
    alphas,
    depth_proxy: int = 1000,
    samples: int = 100_000,
    seed: int = 0,
    workers: int | None = None,
    nodes: int = DEFAULT_NODES,
    alpha_star: float | None = None,
) -> BetaScan:
    """Fit P(depth >= depth_proxy) ~ (z - z_c)^beta along supercritical family members."""
    alphas = np.asarray(list(alphas), dtype=float)
    if alphas.size == 0:
        raise MeasureError("beta scan needs alphas")
    if depth_proxy < 500:
        raise MeasureError("depth_proxy must be >= 500")
    b = family.b
    zc = 1.0 / b
    zs, surv, se = [], [], []
    for k, a in enumerate(alphas):
        m = family.member(float(a))
        z = z_of_rho(m, b, nodes=nodes).z
        if z <= zc:
            raise MeasureError(f"alpha={a} is not supercritical (z={z:.6g})")
        res = dynamics.mc_chi_and_survival(m, b, v, samples, depth_proxy, seed + k, workers)
        zs.append(z)
        surv.append(res.survival)
        se.append(res.survival_stderr)
    zs, surv, se = np.array(zs), np.array(surv), np.array(se)
    fit = fit_supercritical(zs - zc, surv, se)
    if alpha_star is None:
        alpha_star = find_critical_alpha(family, nodes=nodes)
    crit = family.member(alpha_star)
    tee = amplitudes(crit, b, v, nodes).tee
    gp = gap_parameters(crit, b, v)
    slope = gp[1] * oracles.gw_critical_slope(b) if gp is not None else None
    return BetaScan(fit, tee, slope, alphas, zs, surv, se)


# ---------------------------------------------------------------------------
# percolation criteria

INFINITE = "infinite_for_large_v"
FINITE = "finite_always"
INCONCLUSIVE = "inconclusive"
MARGINAL = "marginal"
_EDGE = 1e-12


@dataclass(frozen=True)
class Verdict:
    outcome: str
    witness: dict

    def __str__(self):
        return self.outcome


def percolation_verdict(measure: Measure, b: int) -> Verdict:
    """Sufficient conditions for infinite avalanches at large v or for finite avalanches at every v."""
    s = summary(measure, b)
    top = mass(measure, 1.0 - 1.0 / b, 1.0)
    w = {"theta_b": s.theta_b, "x_star": s.x_star, "rho_top": top, "inv_b": 1.0 / b}
    if top > 1.0 / b + _EDGE:
        return Verdict(INFINITE, w)
    if s.marginal:
        return Verdict(MARGINAL, w)
    if s.theta_b < 1.0:
        return Verdict(FINITE, w)
    reach = mass(measure, max(1.0 - s.theta_b / b, 0.0), 1.0)
    w["rho_reach"] = reach
    if reach <= 1.0 / b + _EDGE:
        return Verdict(FINITE, w)
    return Verdict(INCONCLUSIVE, w)
