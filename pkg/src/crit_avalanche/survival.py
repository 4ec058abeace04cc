"""Deterministic survival probabilities of Q-paths.

``Z_n(theta)`` is the probability that the path values ``Q_0 = theta``,
``Q_k = X_k + Q_{k-1} / b`` all stay >= 1 for ``k <= n``.  Two exact-quadrature
discretizations are used:

* forward: the sub-probability density of ``Q_k`` on the survival event is
  pushed through ``f -> int_{q >= 1} f(q) phi(w - q/b) dq``;
* backward: ``Z_{n+1}(theta) = 1{theta >= 1} E Z_n(X + theta/b)`` on a
  theta-grid, which yields every theta at once.

The first feeds :func:`propagate` and :func:`z_of_rho`; the second feeds
:func:`psi` and :func:`chi_quadrature`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .grid import GridFunction, hat_integrals, integrate, kernel_matrix, node_positions, product_integrals
from .measures import Measure, MeasureError, NotFlatError, mass, require_flat, summary

DEFAULT_NODES = 4096


class NonConvergence(RuntimeError):
    """An iteration hit its cap; ``details`` carries the last diagnostics."""

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details


@dataclass(frozen=True)
class SurvivalDensity:
    theta: float
    n: int
    density: GridFunction
    mass: float
    degenerate: bool = False


@dataclass(frozen=True)
class ZEstimate:
    """Critical functional estimate; unpacks as ``(z, half_width)``."""

    z: float
    half_width: float
    bracket: tuple = (0.0, 1.0)
    n: int = 0
    rate: float = float("nan")
    ratios: tuple = field(default=(), repr=False)  # successive ratios at theta = 1
    ratios_thetab: tuple = field(default=(), repr=False)

    @property
    def theta_gap(self) -> float:
        """|final ratio at theta = 1 - final ratio at theta_b|."""
        if not self.ratios:
            return 0.0
        return abs(self.ratios[-1] - self.ratios_thetab[-1])

    def __iter__(self):
        yield self.z
        yield self.half_width


# ---------------------------------------------------------------------------
# operators


@lru_cache(maxsize=16)
def forward_operator(measure: Measure, b: int, hi: float, nodes: int):
    """(K, g) on the grid [1, hi]: K pushes a density one layer, g integrates survival.

    K[j, i] = int hat_i(q) phi(w_j - q/b) dq and g_i = int hat_i(q) rho([1 - q/b, 1]) dq.
    """
    w = node_positions(1.0, hi, nodes)
    K = kernel_matrix(measure, 1.0, hi, nodes, -1.0 / b, w)
    g = integrate(measure, 1.0, hi, nodes, 1.0, hi, b=b, use_g=True)
    K.setflags(write=False)
    g.setflags(write=False)
    return K, g


@lru_cache(maxsize=16)
def backward_operator(measure: Measure, b: int, hi: float, nodes: int):
    """L[j, i] = int hat_i(x + theta_j/b) phi(x) dx on the theta-grid [1, hi].

    Functions vanish below 1 unless a caller adds its own below-value term using
    the complementary row mass.
    """
    th = node_positions(1.0, hi, nodes)
    L = kernel_matrix(measure, 1.0, hi, nodes, 1.0, -th / b)
    L.setflags(write=False)
    return L


def _grid_hi(measure: Measure, b: int, *extra) -> float:
    s = summary(measure, b)
    return float(max(s.theta_b, *extra)) if extra else float(s.theta_b)


def _first_two(measure: Measure, b: int, theta: float, hi: float, nodes: int):
    """Exact Z_1, Z_2 and the exact node values of f_1, f_2."""
    w = node_positions(1.0, hi, nodes)
    z1 = mass(measure, min(max(1.0 - theta / b, 0.0), 1.0), 1.0)
    f1 = np.asarray(measure.density(w - theta / b), dtype=float)
    z2 = integrate(measure, 1.0, hi, nodes, 1.0, hi, b=b, phi1=(1.0, -theta / b), use_g=True, hatless=True)
    f2 = product_integrals(measure, 1.0, hi, (1.0, -theta / b), -1.0 / b, w)
    return z1, z2, f1, f2


def _forward_logs(measure, b, theta, hi, nodes, n):
    """log Z_k for k = 0..n and the final density scaled as f_n = exp(shift) * vec."""
    logz = np.full(n + 1, -np.inf)
    logz[0] = 0.0
    if n == 0:
        return logz, None, 0.0
    z1, z2, f1, f2 = _first_two(measure, b, theta, hi, nodes)
    logz[1] = math.log(z1) if z1 > 0 else -math.inf
    if n == 1:
        return logz, f1, 0.0
    logz[2] = math.log(z2) if z2 > 0 else -math.inf
    K, g = forward_operator(measure, b, hi, nodes)
    m = float(np.max(f2))
    if m == 0.0:
        return logz, f2, 0.0
    vec, shift = f2 / m, math.log(m)
    for k in range(2, n):
        # Z_{k+1} = int f_k G, then f_{k+1} = K f_k
        gz = float(g @ vec)
        logz[k + 1] = shift + math.log(gz) if gz > 0 else -math.inf
        vec = K @ vec
        s = float(np.max(vec))
        if s == 0.0:
            break
        vec = vec / s
        shift += math.log(s)
    return logz, vec, shift


# ---------------------------------------------------------------------------
# public operations


def _check_theta(measure, b, theta, theta_max):
    if theta < 0:
        raise MeasureError(f"theta must be >= 0, got {theta}")
    cap = summary(measure, b).theta_b + 1.0 if theta_max is None else theta_max
    if theta > cap:
        raise MeasureError(f"theta={theta} exceeds theta_max={cap}")


def propagate(
    measure: Measure, b: int, theta: float, n: int, nodes: int = DEFAULT_NODES, theta_max: float | None = None
):
    """Z_0..Z_n at ``theta`` and the survival density of Q_n.

    Returns ``(Z, SurvivalDensity)``.  The density lives on [1, max(theta_b, theta)].
    """
    require_flat(measure, b)
    _check_theta(measure, b, theta, theta_max)
    if n < 0:
        raise MeasureError("n must be >= 0")
    hi = _grid_hi(measure, b, theta)
    if theta < 1.0:
        Z = np.zeros(n + 1)
        dens = GridFunction(1.0, hi, np.zeros(nodes))
        return Z, SurvivalDensity(theta, n, dens, 0.0, n == 0)
    logz, vec, shift = _forward_logs(measure, b, theta, hi, nodes, n)
    Z = np.exp(logz)
    if n == 0:
        vals = _spike(hi, nodes, theta)
        return Z, SurvivalDensity(theta, 0, GridFunction(1.0, hi, vals), 1.0, True)
    vals = vec * math.exp(shift) if vec is not None else np.zeros(nodes)
    return Z, SurvivalDensity(theta, n, GridFunction(1.0, hi, vals), float(Z[n]))


def _spike(hi, nodes, theta):
    # point mass at theta as a unit-mass hat on the nearest node
    h = (hi - 1.0) / (nodes - 1)
    i = int(round((theta - 1.0) / h))
    vals = np.zeros(nodes)
    vals[i] = 1.0 / hat_integrals(1.0, hi, nodes, 1.0, hi)[i]
    return vals


def conditioned_density(
    measure: Measure, b: int, theta: float, n: int, nodes: int = DEFAULT_NODES
) -> SurvivalDensity:
    """Law of Q_n given survival of Q_0..Q_n, normalized to mass 1."""
    Z, sd = propagate(measure, b, theta, n, nodes)
    if not sd.mass > 0:
        raise MeasureError(f"Z_{n}({theta}) = 0; nothing to condition on")
    total = sd.density.integral()
    if not total > 0:
        raise MeasureError("grid density has zero mass")
    return SurvivalDensity(theta, n, sd.density.with_values(sd.density.values / total), 1.0, sd.degenerate)


def z_of_rho(
    measure: Measure, b: int, tol: float = 1e-10, nodes: int = DEFAULT_NODES, n_max: int = 5000
) -> ZEstimate:
    """Critical functional z(rho) from consecutive survival ratios at theta = 1 and theta_b."""
    if measure.atoms:
        raise NotFlatError("measure has atoms; the grid solvers need a bounded density")
    s = summary(measure, b)
    if s.mass_top <= 0:
        return ZEstimate(0.0, 0.0, (0.0, 0.0), 1)
    require_flat(measure, b)
    hi = s.theta_b
    K, g = forward_operator(measure, b, hi, nodes)
    state = []
    for theta in (1.0, hi):
        z1, z2, _, f2 = _first_two(measure, b, theta, hi, nodes)
        state.append([f2, math.log(z1), math.log(z2)])
    r_hist = [[math.exp(st[2] - st[1])] for st in state]
    logz = [[0.0, st[1], st[2]] for st in state]
    vecs = [st[0] / np.max(st[0]) for st in state]
    shifts = [math.log(np.max(st[0])) for st in state]
    diffs = []
    for k in range(2, n_max):
        for t in range(2):
            lz = shifts[t] + math.log(float(g @ vecs[t]))
            r_hist[t].append(math.exp(lz - logz[t][-1]))
            logz[t].append(lz)
            v = K @ vecs[t]
            m = float(np.max(v))
            vecs[t] = v / m
            shifts[t] += math.log(m)
        r1, r2 = r_hist[0][-1], r_hist[1][-1]
        d1 = abs(r1 - r_hist[0][-2])
        d2 = abs(r2 - r_hist[1][-2])
        gap = abs(r1 - r2)
        diffs.append(max(d1, d2))
        if gap < tol and d1 < tol and d2 < tol:
            n = k + 1
            bracket = (math.exp(logz[0][-1] / n), math.exp(logz[1][-1] / n))
            return ZEstimate(0.5 * (r1 + r2), max(gap, d1, d2), bracket, n, _rate(diffs), tuple(r_hist[0]), tuple(r_hist[1]))
    n = n_max
    bracket = (math.exp(logz[0][-1] / n), math.exp(logz[1][-1] / n))
    raise NonConvergence(
        f"survival ratios did not settle within {n_max} steps",
        bracket=bracket,
        ratio_theta1=r_hist[0][-1],
        ratio_thetab=r_hist[1][-1],
    )


def _rate(diffs):
    d = np.array([x for x in diffs if x > 0])
    if d.size < 3:
        return float("nan")
    r = d[1:] / d[:-1]
    return float(np.median(r[-min(10, r.size):]))


@dataclass(frozen=True)
class PsiProfile:
    psi: GridFunction
    z: float  # eigenvalue of the discretized backward operator
    factors: int


def psi_profile(
    measure: Measure, b: int, theta_hi: float | None = None, nodes: int = DEFAULT_NODES,
    tol: float = 1e-12, max_factors: int = 500,
) -> PsiProfile:
    """psi(theta) = prod_k Z_{k+1}(theta) / (z Z_k(theta)) on [1, max(theta_b, theta_hi)]."""
    require_flat(measure, b)
    hi = _grid_hi(measure, b, *(() if theta_hi is None else (theta_hi,)))
    L = backward_operator(measure, b, hi, nodes)
    vec = np.ones(nodes)  # Z_0 = 1 on theta >= 1
    log_scale = np.zeros(nodes)
    ratios = None
    k = 0
    for k in range(1, max_factors + 1):
        nxt = L @ vec
        if np.any(nxt <= 0):
            raise MeasureError("Z_n vanishes on part of [1, theta_b]; z(rho) = 0 has no psi profile")
        ratios = nxt / vec
        vec = nxt
        spread = float(ratios.max() - ratios.min())
        m = float(vec.max())
        vec = vec / m
        log_scale += math.log(m)
        if spread < tol * float(ratios.mean()):
            break
    z = float(np.mean(ratios))
    psi_vals = vec * np.exp(log_scale - k * math.log(z))
    return PsiProfile(GridFunction(1.0, hi, psi_vals, below=0.0), z, k)


def psi(measure: Measure, b: int, theta_hi: float | None = None, nodes: int = DEFAULT_NODES, tol: float = 1e-12):
    """Limit profile psi = lim Z_n / z^n as a grid function (zero below 1)."""
    return psi_profile(measure, b, theta_hi, nodes, tol).psi


def expect_shifted(measure: Measure, fn: GridFunction, shift: float, below: float = 0.0) -> float:
    """E fn(X + shift), with ``below`` used where X + shift < fn.lo."""
    r = kernel_matrix(measure, fn.lo, fn.hi, fn.nodes, 1.0, [-shift])[0]
    inside = mass(measure, min(max(fn.lo - shift, 0.0), 1.0), 1.0)
    return float(r @ fn.values) + below * (1.0 - inside)


@dataclass(frozen=True)
class ChiResult:
    value: float
    ratio: float  # limiting term ratio b * z
    terms: int
    diverged: bool


def chi_details(
    measure: Measure, b: int, v: float, tol: float = 1e-10, nodes: int = DEFAULT_NODES, n_max: int = 100000
) -> ChiResult:
    if not v > 0:
        raise MeasureError(f"v must be positive, got {v}")
    if measure.atoms:
        raise NotFlatError("measure has atoms; the grid solvers need a bounded density")
    s = summary(measure, b)
    if s.marginal:
        raise NotFlatError("theta_b == 1 is the excluded marginal case")
    t0 = mass(measure, min(max(1.0 - v, 0.0), 1.0), 1.0)
    if t0 == 0.0:
        return ChiResult(0.0, 0.0, 1, False)
    hi = max(s.theta_b, s.x_star + v, 1.0 + 1e-9)
    L = backward_operator(measure, b, hi, nodes)
    r = kernel_matrix(measure, 1.0, hi, nodes, 1.0, [-v])[0]
    vec = np.ones(nodes)
    log_scale = 0.0
    total = t0
    prev_term, prev_q = t0, None
    q = 0.0
    for n in range(1, n_max):
        vec = L @ vec
        m = float(vec.max())
        if m == 0.0:
            return ChiResult(total, 0.0, n, False)
        vec /= m
        log_scale += math.log(m) + math.log(b)
        term = math.exp(log_scale) * float(r @ vec)
        q = term / prev_term if prev_term > 0 else 0.0
        stable = prev_q is not None and abs(q - prev_q) < 1e-13
        if stable and q >= 1.0 - 1e-9:
            return ChiResult(math.inf, q, n, True)
        total += term
        if stable or term < tol * total * max(1.0 - q, 1e-300):
            # geometric tail beyond the last term
            if q < 1.0:
                total += term * q / (1.0 - q)
            return ChiResult(total, q, n, False)
        if not math.isfinite(total):
            return ChiResult(math.inf, q, n, True)
        prev_term, prev_q = term, q
    raise NonConvergence(f"chi series did not settle within {n_max} terms", partial_sum=total, ratio=q)


def chi_quadrature(
    measure: Measure, b: int, v: float, tol: float = 1e-10, nodes: int = DEFAULT_NODES
) -> float:
    """Mean avalanche size sum_n b^n E Z_n(X + v); +inf when the series diverges."""
    return chi_details(measure, b, v, tol, nodes).value
