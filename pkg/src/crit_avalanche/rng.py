"""Counter-based per-site randomness.

Every site of the tree gets a 64-bit key derived from ``(seed, sample index)``
for the root and from ``(parent key, child index)`` below it.  A site's uniform
variate is a pure function of its key, so any traversal order, any simulator
and any number of workers see the same energy field.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_ROOT_SALT = np.uint64(0xD1B54A32D192ED03)
_CHILD_MUL = np.uint64(0xA24BAED4963EE407)
_UNIFORM_SALT = np.uint64(0x8CB92BA72F3D8DD7)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_INV53 = 1.0 / 9007199254740992.0


@nb.njit(cache=True, inline="always", error_model="numpy")
def splitmix(z):
    z = z + _GOLDEN
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@nb.njit(cache=True, inline="always", error_model="numpy")
def root_key(seed, index):
    return splitmix(splitmix(seed) ^ splitmix(index + _ROOT_SALT))


@nb.njit(cache=True, inline="always", error_model="numpy")
def child_key(key, i):
    return splitmix(key ^ ((np.uint64(i) + _ONE) * _CHILD_MUL))


@nb.njit(cache=True, inline="always", error_model="numpy")
def key_uniform(key):
    """Uniform double in [0, 1) with 53 random bits."""
    return float(splitmix(key ^ _UNIFORM_SALT) >> _S11) * _INV53


@nb.njit(cache=True, inline="always", error_model="numpy")
def inverse_cdf(u, kind, lo, hi, f_lo, slope, cum_end):
    """Generalized inverse CDF of a piecewise-linear-plus-atoms law."""
    n = kind.shape[0]
    # first component whose cumulative mass exceeds u
    a, c = 0, n - 1
    while a < c:
        m = (a + c) >> 1
        if cum_end[m] > u:
            c = m
        else:
            a = m + 1
    i = a
    if kind[i] == 1:
        return lo[i]
    start = cum_end[i - 1] if i > 0 else 0.0
    t = u - start
    if t < 0.0:
        t = 0.0
    fl = f_lo[i]
    k = slope[i]
    disc = fl * fl + 2.0 * k * t
    if disc < 0.0:
        disc = 0.0
    den = fl + math.sqrt(disc)
    d = 2.0 * t / den if den > 0.0 else 0.0
    return min(lo[i] + d, hi[i])


@nb.njit(cache=True, inline="always", error_model="numpy")
def lookup_override(key, okeys, ovals):
    """Binary search in sorted override keys; NaN when absent."""
    a, c = 0, okeys.shape[0]
    while a < c:
        m = (a + c) >> 1
        if okeys[m] < key:
            a = m + 1
        else:
            c = m
    if a < okeys.shape[0] and okeys[a] == key:
        return ovals[a]
    return np.nan


@nb.njit(cache=True, inline="always", error_model="numpy")
def site_energy(key, kind, lo, hi, f_lo, slope, cum_end, okeys, ovals):
    if okeys.shape[0] > 0:
        x = lookup_override(key, okeys, ovals)
        if not np.isnan(x):
            return x
    return inverse_cdf(key_uniform(key), kind, lo, hi, f_lo, slope, cum_end)


def path_key(seed: int, index: int, path) -> np.uint64:
    """Key of the site reached from the root by the 0-based child indices in ``path``."""
    k = root_key(np.uint64(seed % 2**64), np.uint64(index % 2**64))
    for i in path:
        k = child_key(np.uint64(k), int(i))
    return np.uint64(k)
