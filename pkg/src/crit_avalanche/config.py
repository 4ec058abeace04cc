"""Experiment configuration: flat ``key = value`` files with ``#`` comments.

Every key is validated before any computation starts and all problems are
reported together.  Measures are described under a prefix (``measure.`` or
``family.rho0.`` / ``family.rho1.``):

* ``kind = uniform`` with ``lo``, ``hi`` (defaults 0 and 1);
* ``kind = gap`` with ``p`` and optional ``x_star``, ``low_cap``;
* ``kind = ramp`` (density 2x);
* ``kind = piecewise`` with repeatable ``piece = l,r,fl,fr`` and ``atom = x,m``;
* ``kind = mix`` with ``alpha`` and nested ``rho0.*`` / ``rho1.*``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Any, Callable

from .measures import Measure, MeasureError, gap_measure, mix, piecewise_measure, ramp_measure, standard_gap, uniform_measure

REPEATABLE = ("piece", "atom")
MEASURE_KINDS = ("uniform", "gap", "ramp", "piecewise", "mix")


class ConfigError(ValueError):
    """Carries every validation problem found in a config file."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def _int(s: str) -> int:
    return int(s.replace("_", ""))


def _float(s: str) -> float:
    x = float(s)
    if math.isnan(x):
        raise ValueError("NaN is not allowed")
    return x


def _floats(s: str) -> tuple[float, ...]:
    out = tuple(_float(t) for t in s.split(",") if t.strip())
    if not out:
        raise ValueError("empty list")
    return out


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    check: Callable[[Any], bool] | None = None
    rule: str = ""


_pos = (lambda x: x > 0, "must be > 0")
_nonneg = (lambda x: x >= 0, "must be >= 0")
_prob = (lambda x: 0.0 <= x <= 1.0, "must lie in [0, 1]")

SCHEMA: dict[str, Key] = {
    "b": Key(_int, 2, lambda x: x >= 2, "must be >= 2"),
    "v": Key(_float, 1.0, *_pos),
    "seed": Key(_int, None, *_nonneg),
    "samples": Key(_int, 100_000, lambda x: x >= 1, "must be >= 1"),
    "depth_cap": Key(_int, 10_000, lambda x: x >= 1, "must be >= 1"),
    "workers": Key(_int, None, lambda x: x >= 1, "must be >= 1"),
    "grid.nodes": Key(_int, 4096, lambda x: x >= 16, "must be >= 16"),
    "zeta.tol": Key(_float, 1e-10, *_pos),
    "zeta.n": Key(_int, 20, lambda x: x >= 1, "must be >= 1"),
    "fp.tol": Key(_float, 1e-12, *_pos),
    "fp.eps": Key(_float, 1e-6, *_pos),
    "fp.n_max": Key(_int, 200, lambda x: x >= 1, "must be >= 1"),
    "fp.theta_max": Key(_float, None, *_pos),
    "psi_v.points": Key(_int, 101, lambda x: x >= 2, "must be >= 2"),
    "lambda": Key(_float, 1e-6, *_prob),
    "binf.nodes": Key(_int, 1024, lambda x: x >= 16, "must be >= 16"),
    "simulate.size_cap": Key(_int, 100_000, lambda x: x >= 1, "must be >= 1"),
    "simulate.n_max": Key(_int, 1000, lambda x: x >= 1, "must be >= 1"),
    "critical.alphas": Key(_floats, tuple(k / 10 for k in range(11)), lambda xs: all(0 <= x <= 1 for x in xs), "values must lie in [0, 1]"),
    "critical.tol": Key(_float, 1e-9, *_pos),
    "gamma.alphas": Key(_floats, None, lambda xs: all(0 <= x <= 1 for x in xs), "values must lie in [0, 1]"),
    "beta.alphas": Key(_floats, None, lambda xs: all(0 <= x <= 1 for x in xs), "values must lie in [0, 1]"),
    "beta.depth_proxy": Key(_int, 1000, lambda x: x >= 500, "must be >= 500"),
    "delta.n_lo": Key(_int, 100, lambda x: x >= 1, "must be >= 1"),
    "delta.n_hi": Key(_int, 10_000, lambda x: x >= 2, "must be >= 2"),
    "delta.points": Key(_int, 40, lambda x: x >= 3, "must be >= 3"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict
    measure: Measure | None
    family: tuple[Measure, Measure] | None
    raw: tuple = field(default=(), repr=False)  # resolved (key, value) lines for output headers

    def __getitem__(self, key):
        return self.values[key]

    def header_lines(self) -> list[str]:
        return [f"{k} = {v}" for k, v in self.raw]

    def with_workers(self, workers: int) -> "ExperimentConfig":
        vals = dict(self.values)
        vals["workers"] = workers
        return ExperimentConfig(vals, self.measure, self.family, self.raw)


def _split_lines(text: str, errors: list[str]) -> list[tuple[int, str, str]]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            errors.append(f"line {lineno}: expected 'key = value', got {body!r}")
            continue
        k, v = (s.strip() for s in body.split("=", 1))
        if not k:
            errors.append(f"line {lineno}: empty key")
            continue
        out.append((lineno, k, v))
    return out


def _build_measure(prefix: str, items: dict, b: int, errors: list[str], used: set) -> Measure | None:
    """Measure described by the keys under ``prefix``; records problems in ``errors``."""

    def get(name, parse=_float, default=None, required=False):
        key = prefix + name
        if key not in items:
            if required:
                errors.append(f"{key}: required for {prefix}kind = {kind}")
            return default
        used.add(key)
        raw = items[key]
        try:
            return [parse(r) for r in raw] if name in REPEATABLE else parse(raw)
        except ValueError as e:
            errors.append(f"{key}: {e}")
            return None

    kind_key = prefix + "kind"
    if kind_key not in items:
        errors.append(f"{kind_key}: required")
        return None
    used.add(kind_key)
    kind = items[kind_key]
    if kind not in MEASURE_KINDS:
        errors.append(f"{kind_key}: unknown kind {kind!r} (expected one of {', '.join(MEASURE_KINDS)})")
        return None
    n_err = len(errors)
    try:
        if kind == "uniform":
            lo, hi = get("lo", default=0.0), get("hi", default=1.0)
            if len(errors) == n_err:
                return uniform_measure(lo, hi)
        elif kind == "gap":
            p = get("p", required=True)
            x_star, low_cap = get("x_star"), get("low_cap")
            if len(errors) == n_err:
                if x_star is None and low_cap is None:
                    return standard_gap(b, p)
                xs = x_star if x_star is not None else standard_gap(b, p).x_star
                if low_cap is None:
                    low_cap = 0.5 * (1.0 - xs / (b - 1))
                return gap_measure(b, xs, p, low_cap)
        elif kind == "ramp":
            return ramp_measure()
        elif kind == "piecewise":
            pieces = get("piece", parse=_floats, default=[])
            atoms = get("atom", parse=_floats, default=[])
            if len(errors) == n_err:
                for pc in pieces:
                    if len(pc) != 4:
                        errors.append(f"{prefix}piece: expected 4 numbers, got {len(pc)}")
                for at in atoms:
                    if len(at) != 2:
                        errors.append(f"{prefix}atom: expected 2 numbers, got {len(at)}")
                if not pieces and not atoms:
                    errors.append(f"{prefix}piece: piecewise measure needs at least one piece or atom")
                if len(errors) == n_err:
                    return piecewise_measure([tuple(p) for p in pieces], [tuple(a) for a in atoms])
        elif kind == "mix":
            alpha = get("alpha", required=True)
            r0 = _build_measure(prefix + "rho0.", items, b, errors, used)
            r1 = _build_measure(prefix + "rho1.", items, b, errors, used)
            if len(errors) == n_err:
                return mix(r0, r1, alpha)
    except MeasureError as e:
        errors.append(f"{prefix.rstrip('.')}: {e}")
    return None


def parse_config(text: str) -> ExperimentConfig:
    """Validated config; raises ConfigError listing every problem."""
    errors: list[str] = []
    lines = _split_lines(text, errors)
    items: dict[str, Any] = {}
    for lineno, k, v in lines:
        leaf = k.rsplit(".", 1)[-1]
        measure_key = k.startswith(("measure.", "family."))
        if measure_key and leaf in REPEATABLE:
            items.setdefault(k, []).append(v)
        elif k in items:
            errors.append(f"line {lineno}: duplicate key {k}")
        else:
            items[k] = v

    values: dict[str, Any] = {}
    for key, spec in SCHEMA.items():
        if key not in items:
            values[key] = spec.default
            continue
        try:
            val = spec.parse(items[key])
        except ValueError as e:
            errors.append(f"{key}: cannot parse {items[key]!r} ({e})")
            continue
        if spec.check is not None and not spec.check(val):
            errors.append(f"{key}: {spec.rule} (got {items[key]})")
            continue
        values[key] = val
    if "seed" not in items:
        errors.append("seed: required (no default seed)")
    env = os.environ.get("CRIT_AVALANCHE_WORKERS")
    if env is not None:
        try:
            w = int(env)
            if w < 1:
                raise ValueError
            values["workers"] = w
        except ValueError:
            errors.append(f"CRIT_AVALANCHE_WORKERS: expected a positive integer, got {env!r}")
    if values.get("workers") is None:
        values["workers"] = os.cpu_count() or 1

    b = values.get("b") if isinstance(values.get("b"), int) else 2
    used: set = set()
    measure = None
    if any(k.startswith("measure.") for k in items):
        measure = _build_measure("measure.", items, b, errors, used)
    family = None
    if any(k.startswith("family.") for k in items):
        r0 = _build_measure("family.rho0.", items, b, errors, used)
        r1 = _build_measure("family.rho1.", items, b, errors, used)
        family = (r0, r1) if r0 is not None and r1 is not None else None
    if measure is None and family is None and not any(e.startswith(("measure", "family")) for e in errors):
        errors.append("measure.kind: a measure (measure.*) or a family (family.rho0.*, family.rho1.*) is required")
    if isinstance(values.get("delta.n_lo"), int) and isinstance(values.get("delta.n_hi"), int):
        if values["delta.n_lo"] >= values["delta.n_hi"]:
            errors.append("delta.n_lo: must be < delta.n_hi")

    for k in items:
        if k not in SCHEMA and k not in used:
            errors.append(f"{k}: unknown key")
    if errors:
        raise ConfigError(errors)

    raw = []
    for k in sorted(items):
        v = items[k]
        if k == "workers":
            continue  # worker count never changes results, so it stays out of output headers
        if isinstance(v, list):
            raw.extend((k, x) for x in v)
        else:
            raw.append((k, v))
    for k in sorted(SCHEMA):
        if k not in items and k != "workers":
            raw.append((k, values[k]))
    return ExperimentConfig(values, measure, family, tuple(raw))


def load_config(path: str) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
