"""Avalanche simulation on the directed b-ary tree.

Two independent mechanisms read the same replayable energy field:

* :func:`run_direct` applies the toppling rule layer by layer, carrying the
  actual site values;
* :func:`run_frontier` explores the open cluster of path values
  ``Q_child = X_child + Q_parent / b`` depth-first.

They must agree exactly on every field.  Monte Carlo drivers fan samples out
over a thread pool of ``nogil`` kernels that write per-sample results, so the
aggregated numbers do not depend on the worker count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .measures import Measure, MeasureError
from .rng import child_key, path_key, root_key, site_energy

CHUNK = 2048
VN_MAX_SITES = 2**20


@dataclass(frozen=True)
class EnergyField:
    """Deterministic i.i.d. field: site energies are a function of (seed, index, path).

    ``overrides`` maps a path (tuple of 0-based child indices, ``()`` for the
    root) to a fixed energy.  It exists for hand-built test configurations.
    """

    seed: int
    b: int
    index: int = 0
    overrides: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.b < 2:
            raise MeasureError("b must be >= 2")
        for path in self.overrides:
            if any(not (0 <= int(i) < self.b) for i in path):
                raise MeasureError(f"override path {path} has a child index outside [0, b)")

    def key(self, path=()) -> np.uint64:
        return path_key(self.seed, self.index, path)

    def override_arrays(self):
        if not self.overrides:
            return np.zeros(0, dtype=np.uint64), np.zeros(0)
        pairs = sorted((int(self.key(p)), float(x)) for p, x in self.overrides.items())
        return np.array([k for k, _ in pairs], dtype=np.uint64), np.array([x for _, x in pairs])

    def energy(self, measure: Measure, path=()) -> float:
        a = measure.arrays
        okeys, ovals = self.override_arrays()
        return float(site_energy(self.key(path), a.kind, a.lo, a.hi, a.f_lo, a.slope, a.cum_end, okeys, ovals))


@dataclass(frozen=True)
class AvalancheOutcome:
    size: int
    boundary_size: int
    depth: int
    truncated: bool
    size_capped: bool = False
    b: int = 2

    @property
    def children_count(self) -> int:
        """b * size: every site whose parent toppled, counting the avalanche itself."""
        return self.b * self.size


def _outcome(res, b) -> AvalancheOutcome:
    size, depth, trunc, capped = (int(r) for r in res)
    return AvalancheOutcome(size, (b - 1) * size + 1, depth, bool(trunc), bool(capped), b)


def _check(v, depth_cap):
    if not v > 0:
        raise MeasureError(f"v must be positive, got {v}")
    if depth_cap < 1:
        raise MeasureError(f"depth_cap must be >= 1, got {depth_cap}")


# ---------------------------------------------------------------------------
# kernels


@nb.njit(cache=True, nogil=True, error_model="numpy")
def _direct_kernel(rkey, b, v, depth_cap, kind, lo, hi, f_lo, slope, cum_end, okeys, ovals):
    val = site_energy(rkey, kind, lo, hi, f_lo, slope, cum_end, okeys, ovals) + v
    if val < 1.0:
        return 0, 0, 0, 0
    keys = np.empty(1, dtype=np.uint64)
    vals = np.empty(1)
    keys[0] = rkey
    vals[0] = val
    count = 1
    size = 0
    depth = 0
    while count > 0:
        if depth == depth_cap:
            return size, depth, 1, 0
        size += count
        depth += 1
        nkeys = np.empty(count * b, dtype=np.uint64)
        nvals = np.empty(count * b)
        ncount = 0
        for s in range(count):
            share = vals[s]  # the toppling site's value, split evenly below
            for i in range(b):
                ck = child_key(keys[s], i)
                cv = site_energy(ck, kind, lo, hi, f_lo, slope, cum_end, okeys, ovals) + share / b
                if cv >= 1.0:
                    nkeys[ncount] = ck
                    nvals[ncount] = cv
                    ncount += 1
            vals[s] = 0.0  # zeroed after toppling
        keys = nkeys[:ncount]
        vals = nvals[:ncount]
        count = ncount
    return size, depth, 0, 0


@nb.njit(cache=True, nogil=True, inline="always", error_model="numpy")
def _frontier_kernel(
    rkey, b, v, depth_cap, size_cap, early_exit, kind, lo, hi, f_lo, slope, cum_end, okeys, ovals, skeys, sq, slayer
):
    # the stack buffers need b * depth_cap + 2 slots
    theta = site_energy(rkey, kind, lo, hi, f_lo, slope, cum_end, okeys, ovals) + v
    if theta < 1.0:
        return 0, 0, 0, 0
    skeys[0] = rkey
    sq[0] = theta
    slayer[0] = 0
    top = 1
    size = 0
    depth = 0
    truncated = 0
    while top > 0:
        top -= 1
        k = skeys[top]
        q = sq[top]
        layer = slayer[top]
        size += 1
        if layer + 1 > depth:
            depth = layer + 1
        if size >= size_cap:
            return size, depth, truncated, 1
        for i in range(b):
            ck = child_key(k, i)
            cq = site_energy(ck, kind, lo, hi, f_lo, slope, cum_end, okeys, ovals) + q / b
            if cq >= 1.0:
                if layer + 1 == depth_cap:
                    truncated = 1
                    if early_exit:
                        return size, depth, truncated, 0
                else:
                    skeys[top] = ck
                    sq[top] = cq
                    slayer[top] = layer + 1
                    top += 1
    return size, depth, truncated, 0


@nb.njit(cache=True)
def _stack(b, depth_cap):
    cap = b * depth_cap + 2
    return np.empty(cap, dtype=np.uint64), np.empty(cap), np.empty(cap, dtype=np.int64)


@nb.njit(cache=True, nogil=True, error_model="numpy")
def _batch_kernel(seed, start, b, v, depth_cap, size_cap, early_exit, kind, lo, hi, f_lo, slope, cum_end, out):
    okeys = np.zeros(0, dtype=np.uint64)
    ovals = np.zeros(0)
    skeys, sq, slayer = _stack(b, depth_cap)
    for j in range(out.shape[0]):
        rkey = root_key(seed, np.uint64(start + j))
        r = _frontier_kernel(
            rkey, b, v, depth_cap, size_cap, early_exit, kind, lo, hi, f_lo, slope, cum_end, okeys, ovals,
            skeys, sq, slayer,
        )
        out[j, 0] = r[0]
        out[j, 1] = r[1]
        out[j, 2] = r[2]
        out[j, 3] = r[3]


@nb.njit(cache=True, nogil=True, inline="always", error_model="numpy")
def _vn_kernel(rkey, b, n, kind, lo, hi, f_lo, slope, cum_end, okeys, ovals):
    if n == 0:
        return 0.0
    # keys of every level, top-down
    total = 0
    width = 1
    for _ in range(n):
        total += width
        width *= b
    keys = np.empty(total, dtype=np.uint64)
    xs = np.empty(total)
    keys[0] = rkey
    start = 0
    width = 1
    for _ in range(n - 1):
        nxt = start + width
        for s in range(width):
            for i in range(b):
                keys[nxt + s * b + i] = child_key(keys[start + s], i)
        start = nxt
        width *= b
    for s in range(total):
        xs[s] = site_energy(keys[s], kind, lo, hi, f_lo, slope, cum_end, okeys, ovals)
    # bottom-up: V_1 = 1 - X at the deepest level
    vals = np.empty(width)
    for s in range(width):
        vals[s] = max(1.0 - xs[start + s], -xs[start + s])
    while start > 0:
        width //= b
        start -= width
        nv = np.empty(width)
        for s in range(width):
            mn = vals[s * b]
            for i in range(1, b):
                if vals[s * b + i] < mn:
                    mn = vals[s * b + i]
            x = xs[start + s]
            nv[s] = max(1.0 - x, b * mn - x)
        vals = nv
    return vals[0]


@nb.njit(cache=True, nogil=True, error_model="numpy")
def _vn_batch(seed, start, b, n, kind, lo, hi, f_lo, slope, cum_end, out):
    okeys = np.zeros(0, dtype=np.uint64)
    ovals = np.zeros(0)
    for j in range(out.shape[0]):
        out[j] = _vn_kernel(root_key(seed, np.uint64(start + j)), b, n, kind, lo, hi, f_lo, slope, cum_end, okeys, ovals)


# ---------------------------------------------------------------------------
# single runs


def _field_args(measure: Measure, fld: EnergyField):
    a = measure.arrays
    okeys, ovals = fld.override_arrays()
    return (a.kind, a.lo, a.hi, a.f_lo, a.slope, a.cum_end, okeys, ovals)


def run_direct(measure: Measure, fld: EnergyField, v: float, depth_cap: int) -> AvalancheOutcome:
    """Literal toppling dynamics, one tree layer per step."""
    _check(v, depth_cap)
    res = _direct_kernel(fld.key(), fld.b, float(v), int(depth_cap), *_field_args(measure, fld))
    return _outcome(res, fld.b)


def run_frontier(
    measure: Measure,
    fld: EnergyField,
    v: float,
    depth_cap: int,
    size_cap: int | None = None,
    early_exit: bool = False,
) -> AvalancheOutcome:
    """Open-cluster exploration of sites whose whole Q-path stays >= 1.

    ``size_cap`` stops once that many sites are counted; ``early_exit`` stops
    at the first site found open at layer ``depth_cap``.  Both give partial
    sizes and are flagged in the outcome.
    """
    _check(v, depth_cap)
    cap = np.iinfo(np.int64).max if size_cap is None else int(size_cap)
    res = _frontier_kernel(
        fld.key(), fld.b, float(v), int(depth_cap), cap, bool(early_exit),
        *_field_args(measure, fld), *_stack(fld.b, int(depth_cap)),
    )
    return _outcome(res, fld.b)


def sample_vn(measure: Measure, fld: EnergyField, n: int) -> float:
    """Minimal root increment that lets the avalanche reach n layers, by exact recursion."""
    _vn_check(fld.b, n)
    return float(_vn_kernel(fld.key(), fld.b, int(n), *_field_args(measure, fld)))


def _vn_check(b, n):
    if n < 0:
        raise MeasureError("n must be >= 0")
    if b**n > VN_MAX_SITES:
        raise MeasureError(f"b**n = {b**n} leaves exceeds the cap {VN_MAX_SITES}")


# ---------------------------------------------------------------------------
# Monte Carlo drivers


def default_workers() -> int:
    env = os.environ.get("CRIT_AVALANCHE_WORKERS")
    if env:
        w = int(env)
        if w < 1:
            raise ValueError("CRIT_AVALANCHE_WORKERS must be >= 1")
        return w
    return os.cpu_count() or 1


def _chunks(samples):
    return [(s, min(CHUNK, samples - s)) for s in range(0, samples, CHUNK)]


def _parallel(task, samples, workers):
    chunks = _chunks(samples)
    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1 or len(chunks) == 1:
        return [task(s, c) for s, c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda sc: task(*sc), chunks))


def simulate_many(
    measure: Measure,
    b: int,
    v: float,
    samples: int,
    depth_cap: int,
    seed: int,
    workers: int | None = None,
    size_cap: int | None = None,
    early_exit: bool = False,
) -> np.ndarray:
    """Per-sample ``(size, depth, truncated, size_capped)`` rows, ordered by sample index."""
    if samples < 1:
        raise MeasureError("samples must be >= 1")
    _check(v, depth_cap)
    a = measure.arrays
    cap = np.iinfo(np.int64).max if size_cap is None else int(size_cap)
    s64 = np.uint64(seed % 2**64)

    def task(start, count):
        out = np.empty((count, 4), dtype=np.int64)
        _batch_kernel(
            s64, start, b, float(v), int(depth_cap), cap, bool(early_exit),
            a.kind, a.lo, a.hi, a.f_lo, a.slope, a.cum_end, out,
        )
        return out

    return np.concatenate(_parallel(task, samples, workers))


@dataclass(frozen=True)
class TailTable:
    n: np.ndarray
    p_ge_n: np.ndarray
    stderr: np.ndarray
    samples: int
    truncated: int  # runs stopped by depth_cap or size_cap
    lower_bound_from: int | None  # first n where truncation makes the estimate a lower bound


def tail_from_sizes(sizes, incomplete=None) -> TailTable:
    """Empirical survival function P(size >= n) for n = 1..max(sizes)."""
    sizes = np.asarray(sizes, dtype=np.int64)
    N = sizes.size
    n_max = int(sizes.max()) if N else 0
    counts = np.bincount(sizes, minlength=n_max + 1)
    ge = np.cumsum(counts[::-1])[::-1][1:]  # ge[k] = #{size >= k+1}
    p = ge / N
    se = np.sqrt(p * (1 - p) / N)
    n = np.arange(1, n_max + 1)
    trunc = 0
    lb = None
    if incomplete is not None:
        incomplete = np.asarray(incomplete, dtype=bool)
        trunc = int(incomplete.sum())
        if trunc:
            lb = int(sizes[incomplete].min()) + 1
    return TailTable(n, p, se, N, trunc, lb)


def mc_tail(
    measure: Measure,
    b: int,
    v: float,
    samples: int,
    depth_cap: int,
    seed: int,
    workers: int | None = None,
    size_cap: int | None = None,
) -> TailTable:
    """Empirical tail of avalanche sizes.

    A run stopped early contributes its partial size; for n above the smallest
    partial size the estimate is a lower bound (``lower_bound_from``).
    """
    rows = simulate_many(measure, b, v, samples, depth_cap, seed, workers, size_cap)
    return tail_from_sizes(rows[:, 0], (rows[:, 2] | rows[:, 3]).astype(bool))


@dataclass(frozen=True)
class ChiSurvival:
    mean_size: float
    stderr: float
    trunc_frac: float
    survival: float
    survival_stderr: float
    samples: int

    @property
    def mean_is_lower_bound(self) -> bool:
        return self.trunc_frac > 0


def mc_chi_and_survival(
    measure: Measure,
    b: int,
    v: float,
    samples: int,
    depth_cap: int,
    seed: int,
    workers: int | None = None,
) -> ChiSurvival:
    """Mean avalanche size and the probability of reaching ``depth_cap`` layers.

    Runs that reach the cap stop there, so the mean is a lower bound whenever
    ``trunc_frac > 0``.
    """
    rows = simulate_many(measure, b, v, samples, depth_cap, seed, workers, early_exit=True)
    sizes = rows[:, 0].astype(float)
    N = len(sizes)
    mean = math.fsum(sizes) / N
    sd = float(np.sqrt(math.fsum((sizes - mean) ** 2) / max(N - 1, 1)))
    trunc = float(rows[:, 2].sum()) / N
    surv = float((rows[:, 1] >= depth_cap).sum()) / N
    return ChiSurvival(mean, sd / math.sqrt(N), trunc, surv, math.sqrt(surv * (1 - surv) / N), N)


def sample_vn_many(measure: Measure, b: int, n: int, samples: int, seed: int, workers: int | None = None) -> np.ndarray:
    """V_n for the fields of sample indices 0..samples-1."""
    _vn_check(b, n)
    a = measure.arrays
    s64 = np.uint64(seed % 2**64)

    def task(start, count):
        out = np.empty(count)
        _vn_batch(s64, start, b, int(n), a.kind, a.lo, a.hi, a.f_lo, a.slope, a.cum_end, out)
        return out

    return np.concatenate(_parallel(task, samples, workers))
