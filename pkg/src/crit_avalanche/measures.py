"""Single-site energy laws on [0, 1].

A :class:`Measure` is a piecewise-linear density plus optional atoms.  The
representation is closed under convex mixing and every integral against it
(masses, first moments, products with other piecewise-linear functions) can be
evaluated exactly, which is what the grid solvers in :mod:`survival` and
:mod:`fixedpoint` rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

MASS_TOL = 1e-12


class MeasureError(ValueError):
    """Invalid measure construction or an operation the measure does not support."""


class NotFlatError(MeasureError):
    """Raised when an operation needs a bounded density with mass near the top."""


@dataclass(frozen=True)
class MeasureSummary:
    x_star: float
    theta_b: float
    density_sup: float
    mflat: bool
    mass_top: float
    marginal: bool = False  # theta_b == 1, excluded from the grid solvers


@dataclass(frozen=True)
class Measure:
    """Piecewise-linear density on [0, 1] plus atoms.

    ``pieces`` holds ``(left, right, f_left, f_right)`` tuples; the density is
    linear on each piece and zero elsewhere.  ``atoms`` holds ``(x, mass)``.
    """

    pieces: tuple = ()
    atoms: tuple = ()
    label: str = field(default="", compare=False)

    def __post_init__(self):
        pieces = tuple(tuple(float(t) for t in p) for p in self.pieces)
        atoms = tuple((float(x), float(m)) for x, m in self.atoms)
        object.__setattr__(self, "pieces", pieces)
        object.__setattr__(self, "atoms", atoms)
        prev = 0.0
        for lo, hi, fl, fr in pieces:
            if not (0.0 <= lo < hi <= 1.0):
                raise MeasureError(f"piece [{lo}, {hi}] not inside [0, 1]")
            if lo < prev - 1e-15:
                raise MeasureError("pieces must be sorted and non-overlapping")
            if fl < 0 or fr < 0 or not (math.isfinite(fl) and math.isfinite(fr)):
                raise MeasureError(f"negative or non-finite density on [{lo}, {hi}]")
            prev = hi
        for x, m in atoms:
            if not (0.0 <= x <= 1.0) or not m > 0:
                raise MeasureError(f"bad atom ({x}, {m})")
        total = self.total_mass()
        if abs(total - 1.0) > MASS_TOL:
            raise MeasureError(f"total mass {total!r} differs from 1")

    def total_mass(self) -> float:
        return math.fsum(0.5 * (hi - lo) * (fl + fr) for lo, hi, fl, fr in self.pieces) + math.fsum(
            m for _, m in self.atoms
        )

    @property
    def has_atoms(self) -> bool:
        return bool(self.atoms)

    def density(self, x):
        """Density at ``x`` (right-continuous at piece boundaries)."""
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for lo, hi, fl, fr in self.pieces:
            inside = (x >= lo) & (x < hi)
            out = np.where(inside, fl + (fr - fl) * (x - lo) / (hi - lo), out)
        return out if out.ndim else float(out)

    def cdf(self, x: float) -> float:
        """P(X <= x)."""
        return mass(self, 0.0, x, True, True) if x >= 0 else 0.0

    @cached_property
    def arrays(self) -> "MeasureArrays":
        return MeasureArrays.build(self)

    @cached_property
    def x_min(self) -> float:
        cands = [lo for lo, hi, fl, fr in self.pieces if fl > 0 or fr > 0]
        cands += [x for x, _ in self.atoms]
        return min(cands)

    @cached_property
    def x_star(self) -> float:
        cands = [hi for lo, hi, fl, fr in self.pieces if fl > 0 or fr > 0]
        cands += [x for x, _ in self.atoms]
        return max(cands)


@dataclass(frozen=True)
class MeasureArrays:
    """Flat arrays consumed by the numba kernels.

    Components are ordered by location; kind 0 is a linear piece and kind 1 an
    atom.  ``cum_end[i]`` is the CDF just after component ``i``.
    """

    kind: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    f_lo: np.ndarray
    slope: np.ndarray
    cum_end: np.ndarray
    # density-only view for quadrature
    bp: np.ndarray  # sorted piece endpoints
    piece_lo: np.ndarray
    piece_hi: np.ndarray
    piece_fl: np.ndarray
    piece_fr: np.ndarray
    piece_cum: np.ndarray  # absolutely continuous mass strictly left of each piece

    @classmethod
    def build(cls, m: Measure) -> "MeasureArrays":
        comps = []
        atoms = sorted(m.atoms)
        for lo, hi, fl, fr in m.pieces:
            if fl == 0 and fr == 0:
                continue
            k = (fr - fl) / (hi - lo)
            cuts = [x for x, _ in atoms if lo < x < hi]
            edges = [lo, *cuts, hi]
            for a, c in zip(edges[:-1], edges[1:]):
                comps.append((a, 0, a, c, fl + k * (a - lo), k))
        for x, w in atoms:
            comps.append((x, 1, x, x, w, 0.0))
        # an atom at x goes before a piece starting at x (and after one ending there)
        comps.sort(key=lambda c: (c[2], 0 if c[1] == 1 else 1))
        kind = np.array([c[1] for c in comps], dtype=np.int64)
        lo = np.array([c[2] for c in comps])
        hi = np.array([c[3] for c in comps])
        f_lo = np.array([c[4] for c in comps])
        slope = np.array([c[5] for c in comps])
        masses = np.where(kind == 1, f_lo, f_lo * (hi - lo) + 0.5 * slope * (hi - lo) ** 2)
        cum_end = np.cumsum(masses)
        pcs = [p for p in m.pieces if p[2] > 0 or p[3] > 0]
        piece_lo = np.array([p[0] for p in pcs])
        piece_hi = np.array([p[1] for p in pcs])
        piece_fl = np.array([p[2] for p in pcs])
        piece_fr = np.array([p[3] for p in pcs])
        pm = 0.5 * (piece_hi - piece_lo) * (piece_fl + piece_fr)
        piece_cum = np.concatenate([[0.0], np.cumsum(pm)[:-1]]) if pcs else np.zeros(0)
        bp = np.unique(np.concatenate([piece_lo, piece_hi])) if pcs else np.zeros(0)
        return cls(kind, lo, hi, f_lo, slope, cum_end, bp, piece_lo, piece_hi, piece_fl, piece_fr, piece_cum)


# ---------------------------------------------------------------------------
# constructors


def uniform_measure(lo: float, hi: float) -> Measure:
    if not (0.0 <= lo < hi <= 1.0):
        raise MeasureError(f"need 0 <= lo < hi <= 1, got lo={lo}, hi={hi}")
    d = 1.0 / (hi - lo)
    return Measure(pieces=((lo, hi, d, d),), label=f"uniform({lo:g},{hi:g})")


def gap_measure(b: int, x_star: float, p: float, low_cap: float) -> Measure:
    """Two uniform blocks leaving [1 - theta_b/b, (b-1)/b) empty.

    Mass ``p`` sits uniformly on [(b-1)/b, x_star] and mass ``1 - p`` on
    [0, low_cap].  On such a law the avalanche is an ordinary Bernoulli(p)
    percolation cluster, which makes every observable exactly solvable.
    """
    if b < 2:
        raise MeasureError("b must be >= 2")
    top = (b - 1) / b
    if not (top < x_star <= 1.0):
        raise MeasureError(f"x_star must lie in ((b-1)/b, 1], got {x_star}")
    if not (0.0 < p <= 1.0):
        raise MeasureError(f"p must lie in (0, 1], got {p}")
    theta_b = b * x_star / (b - 1)
    gap_lo = 1.0 - theta_b / b
    if not (0.0 <= low_cap < gap_lo):
        raise MeasureError(f"low_cap={low_cap} violates the gap condition low_cap < 1 - theta_b/b = {gap_lo:g}")
    if p < 1.0 and low_cap <= 0.0:
        raise MeasureError("p < 1 needs low_cap > 0 to place the remaining mass")
    pieces = []
    if p < 1.0:
        d0 = (1.0 - p) / low_cap
        pieces.append((0.0, low_cap, d0, d0))
    d1 = p / (x_star - top)
    pieces.append((top, x_star, d1, d1))
    return Measure(pieces=tuple(pieces), label=f"gap(b={b},x*={x_star:g},p={p:g},cap={low_cap:g})")


def standard_gap(b: int, p: float) -> Measure:
    """The gap measure used throughout the tests and demos."""
    if b == 2:
        return gap_measure(2, 0.8, p, 0.05)
    x_star = 1.0 - 0.1 / (b - 1)
    low_cap = 0.5 * (1.0 - b * x_star / ((b - 1) * b))
    return gap_measure(b, x_star, p, low_cap)


def piecewise_measure(pieces, atoms=()) -> Measure:
    return Measure(pieces=tuple(pieces), atoms=tuple(atoms), label="piecewise")


def ramp_measure() -> Measure:
    """Density 2x on [0, 1]."""
    return Measure(pieces=((0.0, 1.0, 0.0, 2.0),), label="ramp")


def mix(rho0: Measure, rho1: Measure, alpha: float) -> Measure:
    """``(1 - alpha) * rho0 + alpha * rho1``."""
    if not (0.0 <= alpha <= 1.0):
        raise MeasureError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return rho0
    if alpha == 1.0:
        return rho1
    cuts = sorted({t for p in rho0.pieces + rho1.pieces for t in p[:2]})
    pieces = []
    for a, c in zip(cuts[:-1], cuts[1:]):
        mid = 0.5 * (a + c)
        fa = (1 - alpha) * _linear_on(rho0, mid, a) + alpha * _linear_on(rho1, mid, a)
        fc = (1 - alpha) * _linear_on(rho0, mid, c) + alpha * _linear_on(rho1, mid, c)
        if fa > 0 or fc > 0:
            pieces.append((a, c, fa, fc))
    atoms: dict[float, float] = {}
    for x, w in rho0.atoms:
        atoms[x] = atoms.get(x, 0.0) + (1 - alpha) * w
    for x, w in rho1.atoms:
        atoms[x] = atoms.get(x, 0.0) + alpha * w
    return Measure(
        pieces=tuple(pieces),
        atoms=tuple(sorted(atoms.items())),
        label=f"mix({rho0.label},{rho1.label},{alpha:g})",
    )


def _linear_on(m: Measure, probe: float, at: float) -> float:
    # value at `at` of the linear formula of the piece containing `probe`
    for lo, hi, fl, fr in m.pieces:
        if lo <= probe < hi:
            return fl + (fr - fl) * (at - lo) / (hi - lo)
    return 0.0


# ---------------------------------------------------------------------------
# queries


def _piece_integral(lo, hi, fl, fr, a, c):
    """Integral of the linear density of one piece over [a, c] (clipped)."""
    a, c = max(a, lo), min(c, hi)
    if c <= a:
        return 0.0
    k = (fr - fl) / (hi - lo)
    fa = fl + k * (a - lo)
    d = c - a
    return fa * d + 0.5 * k * d * d


def mass(measure: Measure, a: float, b2: float, include_left: bool = True, include_right: bool = True) -> float:
    """rho of the interval between ``a`` and ``b2`` with the stated endpoint inclusion."""
    if a > b2:
        raise MeasureError("mass() needs a <= b2")
    total = math.fsum(_piece_integral(*p, a, b2) for p in measure.pieces)
    for x, w in measure.atoms:
        left_ok = x > a or (include_left and x == a)
        right_ok = x < b2 or (include_right and x == b2)
        if left_ok and right_ok:
            total += w
    return min(max(total, 0.0), 1.0)


def sample(measure: Measure, variate: float) -> float:
    """Generalized inverse CDF: the image of a uniform variate in [0, 1)."""
    if not (0.0 <= variate < 1.0):
        raise MeasureError("variate must lie in [0, 1)")
    from .rng import inverse_cdf

    a = measure.arrays
    return float(inverse_cdf(variate, a.kind, a.lo, a.hi, a.f_lo, a.slope, a.cum_end))


def summary(measure: Measure, b: int) -> MeasureSummary:
    if b < 2:
        raise MeasureError("b must be >= 2")
    x_star = measure.x_star
    theta_b = b / (b - 1) * x_star
    if measure.atoms:
        sup = math.inf
    else:
        sup = max((max(fl, fr) for _, _, fl, fr in measure.pieces), default=0.0)
    top = mass(measure, 1.0 - 1.0 / b, 1.0)
    mflat = (not measure.atoms) and math.isfinite(sup) and top > 0
    marginal = abs(theta_b - 1.0) < 1e-12
    return MeasureSummary(x_star, theta_b, sup, mflat, top, marginal)


def require_flat(measure: Measure, b: int, allow_empty_top: bool = False) -> MeasureSummary:
    """Check the bounded-density class needed by the grid solvers."""
    s = summary(measure, b)
    if measure.atoms:
        raise NotFlatError("measure has atoms; the grid solvers need a bounded density")
    if s.marginal:
        raise NotFlatError("theta_b == 1 (x_star = 1 - 1/b) is the excluded marginal case")
    if not allow_empty_top and s.mass_top <= 0:
        raise NotFlatError("measure puts no mass on [1 - 1/b, 1]")
    return s
