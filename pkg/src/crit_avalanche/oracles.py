"""Independent ground truth for the tests.

Nothing here touches the grid machinery or the numba simulators: branching
process quantities come from closed forms and scipy's binomial law, and the
path Monte Carlo samples energies by rejection with numpy's Generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from .measures import Measure, MeasureError


@dataclass(frozen=True)
class GWSpec:
    """Galton-Watson tree with binomial(b, p) offspring."""

    b: int
    p: float

    def __post_init__(self):
        if self.b < 1:
            raise ValueError("b must be >= 1")
        if not (0.0 <= self.p <= 1.0):
            raise ValueError(f"p must lie in [0, 1], got {self.p}")


def progeny_pmf(spec: GWSpec, n_max: int) -> np.ndarray:
    """P(N = n) for n = 1..n_max, from P(N = n) = P(Bin(b n, p) = n - 1) / n."""
    if n_max > 10**5:
        raise ValueError("n_max must be <= 1e5")
    n = np.arange(1, n_max + 1)
    if spec.p == 0.0:
        out = np.zeros(n_max)
        out[0] = 1.0
        return out
    with np.errstate(divide="ignore"):
        logp = stats.binom.logpmf(n - 1, spec.b * n, spec.p) - np.log(n)
    return np.exp(logp)


def otter_dwass_tail(spec: GWSpec, n_max: int) -> np.ndarray:
    """P(N >= n) for n = 1..n_max; includes the mass of infinite trees."""
    pmf = progeny_pmf(spec, n_max)
    below = np.concatenate([[0.0], np.cumsum(pmf)[:-1]])
    return np.clip(1.0 - below, 0.0, 1.0)


def otter_dwass_amplitude(b: int) -> float:
    """lim n^(1/2) P(N >= n) at p = 1/b."""
    return math.sqrt(2.0 * b / (math.pi * (b - 1)))


def gw_survival(spec: GWSpec, tol: float = 1e-12) -> float:
    """Survival probability: the largest root of s = 1 - (1 - p s)^b (0 when b p <= 1)."""
    b, p = spec.b, spec.p
    if b * p <= 1.0:
        return 0.0

    def f(s):
        return -math.expm1(b * math.log1p(-p * s)) - s if p * s < 1 else 1.0 - s

    # f > 0 just above 0 when b p > 1 and f(1) <= 0; bisect on the sign change
    lo, hi = 1e-300, 1.0
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def gw_critical_slope(b: int) -> float:
    """d s / d (p - 1/b) at criticality."""
    return 2.0 * b * b / (b - 1)


def gap_chi(b: int, p: float, root_prob: float) -> float:
    """Mean cluster size of the gap-measure avalanche; +inf at or above criticality."""
    if b * p >= 1.0:
        return math.inf
    return root_prob / (1.0 - b * p)


def gap_external_field(b: int, p: float, lam: float) -> float:
    """Value of B on [1, theta_b] for a gap measure: root u of u = lam + (1-lam) Phi_b(p u + (1-p) lam)."""

    def f(u):
        return lam + (1.0 - lam) * (1.0 - (1.0 - (p * u + (1.0 - p) * lam)) ** b) - u

    if lam >= 1.0:
        return 1.0
    if lam <= 0.0:
        return 0.0
    # f is concave with f(lam) >= 0 >= f(1): exactly one root in [lam, 1]
    return optimize.brentq(f, lam, 1.0, xtol=1e-300, rtol=4 * np.finfo(float).eps)


# ---------------------------------------------------------------------------
# Monte Carlo of Q-paths


def sample_rejection(measure: Measure, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draws from the measure: pick a component by mass, then reject within linear pieces."""
    comps = []
    for lo, hi, fl, fr in measure.pieces:
        w = 0.5 * (hi - lo) * (fl + fr)
        if w > 0:
            comps.append((w, lo, hi, fl, fr))
    for x, w in measure.atoms:
        comps.append((w, x, x, 0.0, 0.0))
    weights = np.array([c[0] for c in comps])
    which = rng.choice(len(comps), size=size, p=weights / weights.sum())
    out = np.empty(size)
    for k, (w, lo, hi, fl, fr) in enumerate(comps):
        idx = np.flatnonzero(which == k)
        if idx.size == 0:
            continue
        if hi == lo:
            out[idx] = lo
            continue
        fmax = max(fl, fr)
        todo = idx
        while todo.size:
            x = lo + (hi - lo) * rng.random(todo.size)
            fx = fl + (fr - fl) * (x - lo) / (hi - lo)
            ok = rng.random(todo.size) * fmax <= fx
            out[todo[ok]] = x[ok]
            todo = todo[~ok]
    return out


def mc_z_path(
    measure: Measure, b: int, theta: float, n: int, samples: int, seed: int, chunk: int = 1_000_000
) -> tuple[np.ndarray, np.ndarray]:
    """Estimates and standard errors of Z_k(theta) for k = 0..n from one set of paths."""
    if samples < 1:
        raise MeasureError("samples must be >= 1")
    alive_counts = np.zeros(n + 1, dtype=np.int64)
    if theta >= 1.0:
        rng = np.random.default_rng(seed)
        done = 0
        while done < samples:
            m = min(chunk, samples - done)
            q = np.full(m, float(theta))
            alive_counts[0] += m
            for k in range(1, n + 1):
                if q.size == 0:
                    break
                q = sample_rejection(measure, q.size, rng) + q / b
                q = q[q >= 1.0]
                alive_counts[k] += q.size
            done += m
    est = alive_counts / samples
    se = np.sqrt(est * (1 - est) / samples)
    return est, se


def mc_z(measure: Measure, b: int, theta: float, n: int, samples: int, seed: int) -> tuple[float, float]:
    """Direct Monte Carlo of Z_n(theta) = P(Q_k >= 1 for k <= n)."""
    est, se = mc_z_path(measure, b, theta, n, samples, seed)
    return float(est[n]), float(se[n])
