"""Uniform grids, piecewise-linear grid functions and exact operator assembly.

Functions on a grid are the piecewise-linear interpolants of their node
values, i.e. combinations of hat functions.  Every transfer operator used by
the solvers has matrix entries of the form

    scale * integral over [A, B] of hat_i(q) * phi(a1 q + c1) [* phi(a2 q + c2)] [* G(q)] dq

with ``phi`` the piecewise-linear density and ``G(q) = rho([1 - q/b, 1])``
piecewise quadratic.  On every sub-interval free of breakpoints the integrand
is a polynomial of degree <= 3, so Simpson's rule evaluates it exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .measures import Measure, MeasureError


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class GridFunction:
    """Piecewise-linear function on ``nodes`` uniform points of [lo, hi].

    Evaluation below ``lo`` returns ``below`` when it is set and raises
    otherwise; evaluation above ``hi`` always raises.
    """

    lo: float
    hi: float
    values: np.ndarray
    below: float | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if not self.lo < self.hi:
            raise GridError(f"need lo < hi, got [{self.lo}, {self.hi}]")
        if vals.ndim != 1 or vals.size < 2:
            raise GridError("a grid function needs at least 2 nodes")

    @property
    def nodes(self) -> int:
        return self.values.size

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.nodes - 1)

    @property
    def x(self) -> np.ndarray:
        return node_positions(self.lo, self.hi, self.nodes)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        tol = 1e-12 * max(1.0, abs(self.hi))
        if np.any(t > self.hi + tol):
            raise GridError(f"evaluation above hi={self.hi}")
        low = t < self.lo - tol
        if np.any(low) and self.below is None:
            raise GridError(f"evaluation below lo={self.lo}")
        out = np.interp(np.clip(t, self.lo, self.hi), self.x, self.values)
        if np.any(low):
            out = np.where(low, self.below, out)
        return out if out.ndim else float(out)

    def integral(self, a: float | None = None, c: float | None = None) -> float:
        """Exact integral of the interpolant over [a, c] within the grid."""
        a = self.lo if a is None else max(a, self.lo)
        c = self.hi if c is None else min(c, self.hi)
        if c <= a:
            return 0.0
        return float(hat_integrals(self.lo, self.hi, self.nodes, a, c) @ self.values)

    def with_values(self, values) -> "GridFunction":
        return GridFunction(self.lo, self.hi, values, self.below)


def node_positions(lo, hi, n):
    x = lo + (hi - lo) * np.arange(n) / (n - 1)
    x[-1] = hi
    return x


def hat_integrals(lo, hi, n, a, c):
    """Integrals of every hat function over [a, c] (clipped to the grid)."""
    out = np.zeros(n)
    _hat_weights(lo, hi, n, a, c, out)
    return out


@nb.njit(cache=True, error_model="numpy")
def _hat_weights(lo, hi, n, a, c, out):
    h = (hi - lo) / (n - 1)
    if a < lo:
        a = lo
    if c > hi:
        c = hi
    if c <= a:
        return
    i0 = int((a - lo) / h)
    if i0 > n - 2:
        i0 = n - 2
    for i in range(i0, n - 1):
        ql = lo + i * h
        qr = lo + (i + 1) * h
        s0 = max(ql, a)
        s1 = min(qr, c)
        if s1 <= s0:
            if ql >= c:
                break
            continue
        # hat_i = (qr - s)/h, hat_{i+1} = (s - ql)/h, integrated exactly
        d = s1 - s0
        out[i] += d * ((qr - s0) + (qr - s1)) / (2 * h)
        out[i + 1] += d * ((s0 - ql) + (s1 - ql)) / (2 * h)


# ---------------------------------------------------------------------------
# measure evaluation inside kernels


@nb.njit(cache=True, inline="always", error_model="numpy")
def _phi_side(x, xm, plo, phi, pfl, pfr):
    """Density formula of the piece containing ``xm``, evaluated at ``x``.

    Evaluating at segment ends with the formula selected at the segment midpoint
    takes one-sided limits at density jumps.
    """
    n = plo.shape[0]
    a, c = 0, n
    while a < c:
        m = (a + c) >> 1
        if phi[m] <= xm:
            a = m + 1
        else:
            c = m
    if a >= n or xm < plo[a]:
        return 0.0
    return pfl[a] + (pfr[a] - pfl[a]) * (x - plo[a]) / (phi[a] - plo[a])


@nb.njit(cache=True, inline="always", error_model="numpy")
def _cdf(t, plo, phi, pfl, pfr, pcum):
    """rho([0, t)) for an atomless measure."""
    n = plo.shape[0]
    a, c = 0, n
    while a < c:
        m = (a + c) >> 1
        if phi[m] <= t:
            a = m + 1
        else:
            c = m
    if a >= n:
        return 1.0
    if t <= plo[a]:
        return pcum[a]
    d = t - plo[a]
    k = (pfr[a] - pfl[a]) / (phi[a] - plo[a])
    return pcum[a] + pfl[a] * d + 0.5 * k * d * d


@nb.njit(cache=True, inline="always", error_model="numpy")
def _integrand(q, qm, a1, c1, use1, a2, c2, use2, use_g, b, plo, phi, pfl, pfr, pcum):
    val = 1.0
    if use1:
        val *= _phi_side(a1 * q + c1, a1 * qm + c1, plo, phi, pfl, pfr)
    if use2:
        val *= _phi_side(a2 * q + c2, a2 * qm + c2, plo, phi, pfl, pfr)
    if use_g:
        val *= 1.0 - _cdf(1.0 - q / b, plo, phi, pfl, pfr, pcum)
    return val


@nb.njit(cache=True, error_model="numpy")
def _breaks(A, B, a1, c1, use1, a2, c2, use2, use_g, b, bp):
    m = bp.shape[0]
    buf = np.empty(3 * m + 2)
    k = 0
    for t in bp:
        if use1:
            buf[k] = (t - c1) / a1
            k += 1
        if use2:
            buf[k] = (t - c2) / a2
            k += 1
        if use_g:
            buf[k] = b * (1.0 - t)
            k += 1
    buf[k] = B
    k += 1
    out = np.sort(buf[:k])
    # keep points strictly inside (A, B] ; B is always present
    j = 0
    res = np.empty(k)
    for t in out:
        if t > A and t <= B:
            if j == 0 or t > res[j - 1]:
                res[j] = t
                j += 1
    return res[:j]


@nb.njit(cache=True, error_model="numpy")
def _row(out, lo, hi, n, A, B, a1, c1, use1, a2, c2, use2, use_g, b, scale, hatless, bp, plo, phi, pfl, pfr, pcum):
    """Accumulate scale * integral over [A, B] of hat_i * integrand into ``out``.

    With ``hatless`` the plain integral is added to ``out[0]``.
    """
    if A < lo:
        A = lo
    if B > hi:
        B = hi
    if B <= A:
        return
    h = (hi - lo) / (n - 1)
    brk = _breaks(A, B, a1, c1, use1, a2, c2, use2, use_g, b, bp)
    p = 0
    i = int((A - lo) / h)
    if i > n - 2:
        i = n - 2
    s0 = A
    while s0 < B and i < n - 1:
        ql = lo + i * h
        qr = lo + (i + 1) * h if i < n - 2 else hi
        cell_end = min(qr, B)
        while s0 < cell_end:
            while p < brk.shape[0] and brk[p] <= s0:
                p += 1
            s1 = cell_end
            if p < brk.shape[0] and brk[p] < s1:
                s1 = brk[p]
            sm = 0.5 * (s0 + s1)
            f0 = _integrand(s0, sm, a1, c1, use1, a2, c2, use2, use_g, b, plo, phi, pfl, pfr, pcum)
            fm = _integrand(sm, sm, a1, c1, use1, a2, c2, use2, use_g, b, plo, phi, pfl, pfr, pcum)
            f1 = _integrand(s1, sm, a1, c1, use1, a2, c2, use2, use_g, b, plo, phi, pfl, pfr, pcum)
            w = scale * (s1 - s0) / 6.0
            if hatless:
                out[0] += w * (f0 + 4.0 * fm + f1)
            else:
                hw = qr - ql
                l0 = (qr - s0) / hw
                lm = (qr - sm) / hw
                l1 = (qr - s1) / hw
                out[i] += w * (l0 * f0 + 4.0 * lm * fm + l1 * f1)
                out[i + 1] += w * ((1 - l0) * f0 + 4.0 * (1 - lm) * fm + (1 - l1) * f1)
            s0 = s1
        i += 1


@nb.njit(cache=True, error_model="numpy")
def _matrix(M, lo, hi, n, lower, upper, a, cs, scale, bp, plo, phi, pfl, pfr, pcum):
    xmin = plo[0]
    xmax = phi[-1]
    for j in range(cs.shape[0]):
        # restrict to the support of phi(a q + c)
        qa = (xmin - cs[j]) / a
        qb = (xmax - cs[j]) / a
        A = max(lower[j], min(qa, qb))
        B = min(upper, max(qa, qb))
        _row(M[j], lo, hi, n, A, B, a, cs[j], True, 0.0, 0.0, False, False, 2,
             scale, False, bp, plo, phi, pfl, pfr, pcum)


@nb.njit(cache=True, error_model="numpy")
def _product_rows(out, lo, hi, n, A, B, a1, c1, a2, cs2, bp, plo, phi, pfl, pfr, pcum):
    tmp = np.zeros(1)
    for j in range(cs2.shape[0]):
        tmp[0] = 0.0
        _row(tmp, lo, hi, n, A, B, a1, c1, True, a2, cs2[j], True, False, 2, 1.0, True, bp, plo, phi, pfl, pfr, pcum)
        out[j] = tmp[0]


# ---------------------------------------------------------------------------
# public assembly helpers


def _flat_arrays(measure: Measure):
    if measure.atoms:
        raise MeasureError("quadrature needs an atomless measure")
    a = measure.arrays
    return a.bp, a.piece_lo, a.piece_hi, a.piece_fl, a.piece_fr, a.piece_cum


def kernel_matrix(measure: Measure, lo, hi, n, a, cs, lower=None, scale=1.0):
    """M[j, i] = scale * int_{q >= lower_j} hat_i(q) phi(a q + cs[j]) dq over the grid."""
    cs = np.ascontiguousarray(cs, dtype=float)
    low = np.full(cs.size, -np.inf) if lower is None else np.broadcast_to(np.asarray(lower, float), cs.shape).copy()
    M = np.zeros((cs.size, n))
    _matrix(M, float(lo), float(hi), int(n), low, float(hi), float(a), cs, float(scale), *_flat_arrays(measure))
    return M


def integrate(measure: Measure, lo, hi, n, A, B, b=2, phi1=None, phi2=None, use_g=False, hatless=False, scale=1.0):
    """Hat-weighted (or plain) exact integral of a product of density factors and G.

    ``phi1``/``phi2`` are ``(a, c)`` pairs meaning ``phi(a q + c)``.
    """
    out = np.zeros(1 if hatless else n)
    a1, c1 = phi1 if phi1 is not None else (1.0, 0.0)
    a2, c2 = phi2 if phi2 is not None else (1.0, 0.0)
    _row(out, float(lo), float(hi), int(n), float(A), float(B), float(a1), float(c1), phi1 is not None,
         float(a2), float(c2), phi2 is not None, bool(use_g), int(b), float(scale), bool(hatless),
         *_flat_arrays(measure))
    return float(out[0]) if hatless else out


def product_integrals(measure: Measure, A, B, phi1, a2, cs2):
    """out[j] = int_A^B phi(a1 q + c1) phi(a2 q + cs2[j]) dq, exactly."""
    cs2 = np.ascontiguousarray(cs2, dtype=float)
    out = np.zeros(cs2.size)
    lo, hi = float(A), float(B)
    _product_rows(out, lo, hi, 2, lo, hi, float(phi1[0]), float(phi1[1]), float(a2), cs2, *_flat_arrays(measure))
    return out

