"""Functional fixed points on grids.

* the threshold distribution functions ``Psi_n`` of the minimal trigger values;
* the stationary law of the path value seen far below the root (``Q_inf``);
* the external-field probability ``B(theta, lam)`` and the constants built
  from it, ``kappa(lam)``, ``B*(lam)`` and ``c``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .grid import GridFunction, hat_integrals, kernel_matrix, node_positions
from .measures import Measure, MeasureError, require_flat, summary
from .survival import DEFAULT_NODES, NonConvergence, backward_operator, conditioned_density

VANISHES = "vanishes"
PERSISTS = "persists"
UNDECIDED = "undecided"


def phi_b(y, b: int):
    """1 - (1 - y)^b: probability that at least one of b independent events of probability y occurs."""
    arr = np.asarray(y, dtype=float)
    if np.any(arr < -1e-12) or np.any(arr > 1 + 1e-12) or np.any(np.isnan(arr)):
        raise ValueError("phi_b needs 0 <= y <= 1")
    arr = np.clip(arr, 0.0, 1.0)
    with np.errstate(divide="ignore"):
        out = -np.expm1(b * np.log1p(-arr))
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# threshold sequence


@dataclass(frozen=True)
class PsiSequence:
    iterates: list
    verdict: str
    threshold: float | None
    residual: float


@lru_cache(maxsize=8)
def _psi_operator(measure: Measure, b: int, theta_max: float, nodes: int):
    # A[j, i] = int_{x >= 1 - t_j} hat_i((x + t_j)/b) phi(x) dx, with y = (x + t_j)/b
    t = node_positions(0.0, theta_max, nodes)
    A = kernel_matrix(measure, 0.0, theta_max, nodes, float(b), -t, lower=1.0 / b, scale=float(b))
    A.setflags(write=False)
    return A


def psi_sequence(
    measure: Measure,
    b: int,
    theta_max: float | None = None,
    nodes: int = DEFAULT_NODES,
    n_max: int = 200,
    eps: float = 1e-6,
    tol: float = 1e-10,
) -> PsiSequence:
    """Iterate Psi_{n+1}(t) = int Phi_b(Psi_n((x + t)/b)) 1{x >= 1 - t} rho(dx) from Psi_0 = 1{t >= 0}."""
    s = require_flat(measure, b)
    tmax = s.theta_b + 1.0 if theta_max is None else float(theta_max)
    if tmax < 1.0 / (b - 1):
        raise MeasureError("theta_max must be >= 1/(b-1) so the recursion stays on the grid")
    A = _psi_operator(measure, b, tmax, nodes)
    cur = np.ones(nodes)
    iterates = [GridFunction(0.0, tmax, cur, below=0.0)]
    verdict = UNDECIDED
    for _ in range(n_max):
        nxt = A @ phi_b(cur, b)
        iterates.append(GridFunction(0.0, tmax, nxt, below=0.0))
        change = float(np.max(np.abs(nxt - cur)))
        cur = nxt
        if cur.max() < eps:
            verdict = VANISHES
            break
        if change < tol:
            verdict = PERSISTS
            break
    residual = float(np.max(np.abs(A @ phi_b(cur, b) - cur)))
    threshold = _first_crossing(iterates[-1], eps) if verdict == PERSISTS else None
    return PsiSequence(iterates, verdict, threshold, residual)


def _first_crossing(fn: GridFunction, eps: float) -> float | None:
    v = fn.values
    idx = np.flatnonzero(v > eps)
    if idx.size == 0:
        return None
    i = int(idx[0])
    x = fn.x
    if i == 0:
        return float(x[0])
    # linear interpolation inside the crossing cell
    return float(x[i - 1] + (eps - v[i - 1]) / (v[i] - v[i - 1]) * (x[i] - x[i - 1]))


# ---------------------------------------------------------------------------
# stationary path value


@dataclass(frozen=True)
class QLaw:
    density: GridFunction
    z_hat: float
    residual: float
    iterations: int = 0

    @property
    def total_mass(self) -> float:
        return self.density.integral()


@lru_cache(maxsize=8)
def _q_operator(measure: Measure, b: int, lo: float, hi: float, nodes: int):
    w = node_positions(lo, hi, nodes)
    K = kernel_matrix(measure, lo, hi, nodes, -1.0 / b, w, lower=1.0)
    above = hat_integrals(lo, hi, nodes, 1.0, hi)
    total = hat_integrals(lo, hi, nodes, lo, hi)
    for a in (K, above, total):
        a.setflags(write=False)
    return K, above, total


def q_grid(measure: Measure, b: int) -> tuple[float, float]:
    s = summary(measure, b)
    return measure.x_min + 1.0 / b, s.theta_b


def q_infinity(
    measure: Measure,
    b: int,
    nodes: int = DEFAULT_NODES,
    tol: float = 1e-12,
    iter_cap: int = 10000,
    init_theta: float = 1.0,
    init_n: int = 8,
) -> QLaw:
    """Stationary law of Q under Q' = X + Q/b conditioned on Q >= 1.

    The map is T(h) = K h / mass(K h) with K h(w) = int_{q >= 1} h(q) phi(w - q/b) dq,
    started from the conditioned law of Q_{init_n} after one more unconditioned step.
    """
    require_flat(measure, b)
    lo, hi = q_grid(measure, b)
    K, above, total = _q_operator(measure, b, lo, hi, nodes)
    start = conditioned_density(measure, b, init_theta, init_n, nodes)
    f = start.density
    # one unconditioned step from the survival grid onto the Q grid
    step = kernel_matrix(measure, f.lo, f.hi, f.nodes, -1.0 / b, node_positions(lo, hi, nodes))
    h = step @ f.values
    h = h / float(total @ h)
    residual = math.inf
    for it in range(1, iter_cap + 1):
        nxt = K @ h
        nxt = nxt / float(total @ nxt)
        residual = float(np.max(np.abs(nxt - h)))
        h = nxt
        if residual < tol:
            break
    else:
        raise NonConvergence(f"Q_inf iteration did not settle in {iter_cap} steps", residual=residual)
    final = K @ h
    residual = float(np.max(np.abs(final / float(total @ final) - h)))
    return QLaw(GridFunction(lo, hi, h, below=0.0), float(above @ h), residual, it)


# ---------------------------------------------------------------------------
# external field


def b_infinity(
    measure: Measure,
    b: int,
    lam: float,
    theta_max: float | None = None,
    nodes: int = 1024,
    tol: float = 1e-13,
    iter_cap: int = 2_000_000,
) -> GridFunction:
    """Fixed point of B = lam + (1 - lam) 1{theta >= 1} Phi_b(E B(X + theta/b)) by monotone iteration from lam."""
    if not (0.0 <= lam <= 1.0):
        raise MeasureError(f"lambda must lie in [0, 1], got {lam}")
    s = require_flat(measure, b)
    hi = s.theta_b if theta_max is None else max(float(theta_max), s.theta_b)
    L = backward_operator(measure, b, hi, nodes)
    outside = 1.0 - L.sum(axis=1)  # probability that X + theta/b < 1
    B = np.full(nodes, float(lam))
    prev_change = None
    for _ in range(iter_cap):
        y = L @ B + lam * outside
        nxt = lam + (1.0 - lam) * phi_b(np.clip(y, 0.0, 1.0), b)
        change = float(np.max(np.abs(nxt - B)))
        B = nxt
        if change == 0.0:
            break
        if prev_change is not None and change < prev_change:
            r = change / prev_change
            if change * r / (1.0 - r) < tol:
                break
        prev_change = change
    else:
        raise NonConvergence("external-field iteration hit its cap", change=change)
    return GridFunction(1.0, hi, B, below=float(lam))


def _conditional_square(measure: Measure, b: int, qlaw: QLaw, fn: GridFunction, below: float) -> float:
    """E-hat([E fn(X + Q/b)]^2 | Q >= 1) with the quadrature used for z_hat."""
    if qlaw.density.nodes != fn.nodes:
        raise MeasureError(
            f"node counts differ ({qlaw.density.nodes} vs {fn.nodes}); compute both on the same resolution"
        )
    q = qlaw.density.x
    M = kernel_matrix(measure, fn.lo, fn.hi, fn.nodes, 1.0, -q / b)
    y = M @ fn.values + below * (1.0 - M.sum(axis=1))
    above = hat_integrals(qlaw.density.lo, qlaw.density.hi, qlaw.density.nodes, 1.0, qlaw.density.hi)
    h = qlaw.density.values
    den = float(above @ h)
    if not den > 0:
        raise MeasureError("Q_inf puts no mass on [1, theta_b]")
    return float(above @ (h * y * y)) / den


def kappa_and_bstar(measure: Measure, b: int, lam: float, qlaw: QLaw, binf: GridFunction) -> tuple[float, float]:
    """kappa(lam) = E-hat([E B(X + Q/b)]^2 | Q >= 1) and B*(lam) = E-hat B(Q)."""
    kappa = _conditional_square(measure, b, qlaw, binf, lam)
    d = qlaw.density
    weights = hat_integrals(d.lo, d.hi, d.nodes, d.lo, d.hi)
    b_star = float(weights @ (d.values * binf(d.x)))
    return kappa, b_star


def c_rho(measure: Measure, b: int, qlaw: QLaw, psi: GridFunction) -> float:
    """c with 1/c^2 = ((b-1)/2) E-hat([E psi(X + Q/b)]^2 | Q >= 1)."""
    if abs(qlaw.z_hat - 1.0 / b) > 1e-4:
        warnings.warn(f"c is meaningful at criticality; z_hat = {qlaw.z_hat:.6g}", stacklevel=2)
    k = _conditional_square(measure, b, qlaw, psi, 0.0)
    if not k > 0:
        raise MeasureError("psi integrates to zero against Q_inf")
    return 1.0 / math.sqrt(0.5 * (b - 1) * k)
