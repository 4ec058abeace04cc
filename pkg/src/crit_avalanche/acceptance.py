"""Acceptance checks shared by the test suite and ``crit-avalanche selftest``.

Each check returns a :class:`CheckResult` with the observed numbers, the
targets and the tolerances it was judged against.
"""

from __future__ import annotations

import math
import os
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from . import dynamics, fixedpoint, oracles
from .criticality import (
    MixtureFamily,
    amplitudes,
    beta_scan,
    delta_scan,
    find_critical_alpha,
    gamma_scan,
    percolation_verdict,
)
from .measures import mass, ramp_measure, standard_gap, summary, uniform_measure
from .survival import propagate, z_of_rho


@dataclass
class CheckResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0
    budget: float | None = None  # runtime budget in seconds, when one applies

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        parts = ", ".join(f"{k}={_fmt(v)}" for k, v in self.details.items())
        budget = f" (budget {self.budget:g}s)" if self.budget else ""
        return f"[{status}] {self.name}: {parts} [{self.seconds:.1f}s{budget}]"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def _timed(name, budget, fn):
    t0 = time.perf_counter()
    passed, details = fn()
    dt = time.perf_counter() - t0
    if budget is not None:
        details["within_budget"] = dt < budget
    return CheckResult(name, bool(passed), details, dt, budget)


GAP_FAMILY_B2 = (0.3, 0.7)  # p at alpha = 0 and alpha = 1


def gap_family(b: int = 2) -> MixtureFamily:
    return MixtureFamily(standard_gap(b, GAP_FAMILY_B2[0]), standard_gap(b, GAP_FAMILY_B2[1]), b)


def _alpha_for_p(p):
    lo, hi = GAP_FAMILY_B2
    return (p - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# 1


def check_simulator_equivalence(instances: int = 10_000, seed: int = 2024, depth_cap: int = 12) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        mismatches = 0
        for _ in range(instances):
            b = int(rng.choice([2, 3]))
            kind = int(rng.integers(3))
            m = (uniform_measure(0.0, 1.0), standard_gap(b, 0.4), standard_gap(b, 0.6))[kind]
            fld = dynamics.EnergyField(int(rng.integers(2**63)), b, int(rng.integers(2**20)))
            v = float(rng.uniform(0.0, 2.0)) + 1e-9
            a = dynamics.run_direct(m, fld, v, depth_cap)
            f = dynamics.run_frontier(m, fld, v, depth_cap)
            if (a.size, a.depth, a.truncated, a.boundary_size) != (f.size, f.depth, f.truncated, f.boundary_size):
                mismatches += 1
        return mismatches == 0, {"instances": instances, "mismatches": mismatches}

    return _timed("1 simulator equivalence", 30.0, run)


# ---------------------------------------------------------------------------
# 2


def check_gap_z(ps=(0.2, 0.4, 0.45, 0.55), tol: float = 1e-6) -> CheckResult:
    def run():
        errs, gaps = [], []
        for p in ps:
            est = z_of_rho(standard_gap(2, p), 2)
            errs.append(abs(est.z - p))
            gaps.append(est.theta_gap)
        ok = max(errs) < tol and max(gaps) < tol
        return ok, {"max_abs_z_minus_p": max(errs), "max_theta_gap": max(gaps), "tol": tol}

    return _timed("2 z exact on gap measures", 10.0, run)


# ---------------------------------------------------------------------------
# 3


def check_zn_cross_validation(samples: int = 10_000_000, seed: int = 5) -> CheckResult:
    ns = (1, 2, 5, 10)

    def run():
        worst = 0.0
        details = {}
        for label, m in (("uniform", uniform_measure(0.0, 1.0)), ("gap0.4", standard_gap(2, 0.4))):
            Z, _ = propagate(m, 2, 1.0, max(ns))
            est, _ = oracles.mc_z_path(m, 2, 1.0, max(ns), samples, seed)
            se = np.sqrt(Z * (1 - Z) / samples)  # binomial spread under the grid value
            z_sig = [abs(Z[n] - est[n]) / se[n] for n in ns]
            worst = max(worst, max(z_sig))
            details[f"{label}_max_sigma"] = max(z_sig)
            if label == "uniform":
                details["Z2_grid_err"] = abs(Z[2] - 0.3125)
                details["Z2_mc_sigma"] = abs(est[2] - 0.3125) / se[2]
        ok = worst < 4.0 and details["Z2_grid_err"] < 1e-6 and details["Z2_mc_sigma"] < 4.0
        return ok, details

    return _timed("3 Z_n grid vs path Monte Carlo", None, run)


# ---------------------------------------------------------------------------
# 4


def check_two_z(tol_z: float = 1e-6, tol_res: float = 1e-8, tol_init: float = 1e-7) -> CheckResult:
    def run():
        d = {}
        ok = True
        for label, m in (("uniform", uniform_measure(0.0, 1.0)), ("gap0.4", standard_gap(2, 0.4)), ("ramp", ramp_measure())):
            z = z_of_rho(m, 2).z
            q1 = fixedpoint.q_infinity(m, 2, init_theta=1.0)
            q2 = fixedpoint.q_infinity(m, 2, init_theta=summary(m, 2).theta_b)
            diff = abs(z - q1.z_hat)
            init = float(np.max(np.abs(q1.density.values - q2.density.values)))
            d[f"{label}_dz"] = diff
            d[f"{label}_residual"] = q1.residual
            d[f"{label}_init_sup"] = init
            ok &= diff < tol_z and q1.residual < tol_res and init < tol_init
        return ok, d

    return _timed("4 z from survival vs Q_inf", 60.0, run)


# ---------------------------------------------------------------------------
# 5


def check_phase_classification(samples: int = 100_000, depth: int = 1000, seed: int = 9) -> CheckResult:
    def run():
        sub, sup = standard_gap(2, 0.4), standard_gap(2, 0.6)
        ps_sub = fixedpoint.psi_sequence(sub, 2)
        ps_sup = fixedpoint.psi_sequence(sup, 2)
        spacing = ps_sup.iterates[-1].spacing
        target = 1.0 - summary(sup, 2).x_star
        mc_sub = dynamics.mc_chi_and_survival(sub, 2, 1.0, samples, depth, seed)
        mc_sup = dynamics.mc_chi_and_survival(sup, 2, 1.0, samples, depth, seed + 1)
        s_exact = oracles.gw_survival(oracles.GWSpec(2, 0.6)) * mass(sup, 0.0, 1.0)
        sigma = abs(mc_sup.survival - s_exact) / mc_sup.survival_stderr
        thr = ps_sup.threshold
        ok = (
            ps_sub.verdict == fixedpoint.VANISHES
            and mc_sub.survival == 0.0
            and ps_sup.verdict == fixedpoint.PERSISTS
            and thr is not None
            and abs(thr - target) <= spacing
            and mc_sup.survival > 0
            and sigma < 4.0
        )
        return ok, {
            "sub_verdict": ps_sub.verdict,
            "sub_survival": mc_sub.survival,
            "sup_verdict": ps_sup.verdict,
            "threshold": thr if thr is not None else math.nan,
            "threshold_target": target,
            "spacing": spacing,
            "sup_survival": mc_sup.survival,
            "gw_survival": s_exact,
            "sigma": sigma,
        }

    return _timed("5 phase classification", 300.0, run)


# ---------------------------------------------------------------------------
# 6


def check_gamma(v: float = 1.0) -> CheckResult:
    def run():
        fam = gap_family()
        zs = np.round(np.linspace(0.40, 0.49, 10), 12)
        res = gamma_scan(fam, v, [_alpha_for_p(z) for z in zs])
        b = fam.b
        exact = 1.0 / b  # root topples surely at v = 1
        prod = res.product
        ok = (
            abs(res.fit.exponent + 1.0) <= 0.02
            and float(np.max(np.abs(prod / exact - 1.0))) <= 0.02
            and abs(res.tau_formula / exact - 1.0) <= 0.02
        )
        return ok, {
            "exponent": res.fit.exponent,
            "stderr": res.fit.stderr,
            "tau_empirical": res.tau_empirical,
            "tau_formula": res.tau_formula,
            "tau_exact": exact,
        }

    return _timed("6 gamma = 1 and tau", 120.0, run)


# ---------------------------------------------------------------------------
# 7


def check_delta(samples: int = 1_000_000, seed: int = 7, v: float = 1.0) -> CheckResult:
    def run():
        res = delta_scan(standard_gap(2, 0.5), 2, v, samples, seed)
        ok = abs(res.fit.exponent + 0.5) <= 0.03 and abs(res.oracle_ratio - 1.0) <= 0.03
        return ok, {
            "exponent": res.fit.exponent,
            "stderr": res.fit.stderr,
            "amplitude": res.fit.amplitude,
            "otter_dwass": res.oracle_amplitude,
            "amplitude_ratio": res.oracle_ratio,
            "theta_formula": res.theta_formula,
            "theta_formula_over_od": res.formula_ratio,
            "sqrt_b_over_b_minus_1": math.sqrt(2.0),
        }

    return _timed("7 delta = 2 with Otter-Dwass amplitude", 600.0, run)


# ---------------------------------------------------------------------------
# 8


def check_beta(samples: int = 100_000, seed: int = 11, depth: int = 1000, v: float = 1.0) -> CheckResult:
    def run():
        fam = gap_family()
        zs = np.round(np.linspace(0.505, 0.55, 10), 12)
        res = beta_scan(fam, v, [_alpha_for_p(z) for z in zs], depth, samples, seed, alpha_star=_alpha_for_p(0.5))
        ok = abs(res.fit.exponent - 1.0) <= 0.05 and abs(res.oracle_ratio - 1.0) <= 0.05
        return ok, {
            "exponent": res.fit.exponent,
            "stderr": res.fit.stderr,
            "amplitude": res.fit.amplitude_nominal,
            "gw_slope": res.oracle_slope,
            "amplitude_ratio": res.oracle_ratio,
            "tee_formula": res.tee_formula,
            "tee_formula_over_slope": res.formula_ratio,
        }

    return _timed("8 beta = 1 with branching-process slope", 600.0, run)


# ---------------------------------------------------------------------------
# 9


def check_external_field(lam: float = 1e-6, nodes: int = 1024) -> CheckResult:
    def run():
        m = standard_gap(2, 0.5)
        binf = fixedpoint.b_infinity(m, 2, lam, nodes=nodes)
        qlaw = fixedpoint.q_infinity(m, 2, nodes=nodes)
        kappa, _ = fixedpoint.kappa_and_bstar(m, 2, lam, qlaw, binf)
        c = amplitudes(m, 2, 1.0).c
        closed = 2.0 * math.sqrt(2.0)
        r_b = binf(1.0) / math.sqrt(lam) / closed
        r_k = 0.5 * kappa / lam
        ok = abs(r_b - 1.0) <= 0.02 and abs(r_k - 1.0) <= 0.02 and abs(c - closed) <= 1e-6
        return ok, {"B_over_sqrt_lam_ratio": r_b, "kappa_ratio": r_k, "c": c, "c_err": abs(c - closed)}

    return _timed("9 external-field asymptotics", 60.0, run)


# ---------------------------------------------------------------------------
# 10


def ks_distance(samples, cdf) -> float:
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    F = cdf(x)
    hi = np.arange(1, n + 1) / n
    lo = np.arange(0, n) / n
    return float(max(np.max(hi - F), np.max(F - lo)))


def check_vn_psi(samples: int = 100_000, seed: int = 3, ns=(4, 6)) -> CheckResult:
    def run():
        m = uniform_measure(0.0, 1.0)
        seq = fixedpoint.psi_sequence(m, 2, n_max=max(ns))
        d = {}
        ok = True
        for n in ns:
            fn = seq.iterates[n]
            vn = dynamics.sample_vn_many(m, 2, n, samples, seed + n)
            ks = ks_distance(vn, lambda x: fn(np.minimum(x, fn.hi)))
            d[f"ks_n{n}"] = ks
            ok &= ks < 0.01
        psi1 = seq.iterates[1]
        exact = np.array([mass(m, min(max(1.0 - t, 0.0), 1.0), 1.0) if t > 0 else 0.0 for t in psi1.x])
        err = float(np.max(np.abs(psi1.values - exact)))
        d["psi1_node_err"] = err
        ok &= err < 1e-12
        return ok, d

    return _timed("10 V_n samples vs Psi_n", 120.0, run)


# ---------------------------------------------------------------------------
# 11

DETERMINISM_CONFIGS = {
    "simulate": "measure.kind = gap\nmeasure.p = 0.5\nsamples = 20000\ndepth_cap = 2000\nsimulate.size_cap = 5000\n",
    "zeta": "measure.kind = uniform\ngrid.nodes = 512\nzeta.n = 8\n",
    "psi": "measure.kind = ramp\ngrid.nodes = 512\n",
    "psi-v": "measure.kind = gap\nmeasure.p = 0.6\ngrid.nodes = 512\nfp.n_max = 30\n",
    "qinf": "measure.kind = uniform\ngrid.nodes = 512\n",
    "binf": "measure.kind = uniform\nlambda = 0.001\nbinf.nodes = 256\n",
    "chi": "measure.kind = gap\nmeasure.p = 0.4\ngrid.nodes = 512\n",
    "critical": (
        "family.rho0.kind = gap\nfamily.rho0.p = 0.3\nfamily.rho1.kind = gap\nfamily.rho1.p = 0.7\n"
        "grid.nodes = 512\ncritical.alphas = 0.1,0.3,0.6\n"
    ),
    "verdict": "measure.kind = uniform\nmeasure.hi = 0.4\n",
    "oracle": "measure.kind = gap\nmeasure.p = 0.5\nsamples = 20000\nzeta.n = 5\n",
    "exponents": (
        "measure.kind = gap\nmeasure.p = 0.5\nsamples = 20000\ndelta.n_lo = 10\ndelta.n_hi = 1000\ngrid.nodes = 512\n"
    ),
}


def _run_cli_outputs(sub, text, workers, root):
    import contextlib
    import io

    from .cli import main

    cfg = os.path.join(root, f"{sub}.conf")
    with open(cfg, "w") as fh:
        fh.write("seed = 17\n" + text)
    out = os.path.join(root, f"{sub}-w{workers}-{len(os.listdir(root))}")
    old = os.environ.get("CRIT_AVALANCHE_WORKERS")
    os.environ["CRIT_AVALANCHE_WORKERS"] = str(workers)
    try:
        argv = [sub, "--config", cfg, "--out", out]
        if sub == "exponents":
            argv += ["--scan", "delta"]
        with contextlib.redirect_stdout(io.StringIO()):
            status = main(argv)
    finally:
        if old is None:
            del os.environ["CRIT_AVALANCHE_WORKERS"]
        else:
            os.environ["CRIT_AVALANCHE_WORKERS"] = old
    files = {}
    for name in sorted(os.listdir(out)):
        if name.endswith(".csv"):
            with open(os.path.join(out, name), "rb") as fh:
                files[name] = fh.read()
    return status, files


def check_determinism(subcommands=None) -> CheckResult:
    def run():
        subs = list(DETERMINISM_CONFIGS) if subcommands is None else list(subcommands)
        w_max = os.cpu_count() or 1
        bad = []
        n_files = 0
        with tempfile.TemporaryDirectory() as root:
            for sub in subs:
                runs = [_run_cli_outputs(sub, DETERMINISM_CONFIGS[sub], w, root) for w in (1, 1, 4, w_max)]
                statuses = {r[0] for r in runs}
                if statuses != {0} or not runs[0][1]:
                    bad.append(f"{sub}:status{sorted(statuses)}")
                    continue
                n_files += len(runs[0][1])
                if any(r[1] != runs[0][1] for r in runs[1:]):
                    bad.append(sub)
        return not bad, {"subcommands": len(subs), "csv_files": n_files, "workers": [1, 4, w_max], "mismatched": bad or "none"}

    return _timed("11 byte-identical CSVs across reruns and workers", None, run)


ACCEPTANCE = (
    check_simulator_equivalence,
    check_gap_z,
    check_zn_cross_validation,
    check_two_z,
    check_phase_classification,
    check_gamma,
    check_delta,
    check_beta,
    check_external_field,
    check_vn_psi,
    check_determinism,
)


# ---------------------------------------------------------------------------
# fast closed-form checks


def _close(a, b, tol):
    return abs(a - b) <= tol


def fast_checks() -> list[CheckResult]:
    """Closed-form and trivial checks; well under a minute."""
    out = []

    def add(name, fn):
        out.append(_timed(name, None, fn))

    u = uniform_measure(0.0, 1.0)
    g4 = standard_gap(2, 0.4)
    g5 = standard_gap(2, 0.5)

    def gap_summary():
        s = summary(g4, 2)
        return _close(s.x_star, 0.8, 1e-15) and _close(s.theta_b, 1.6, 1e-12), {"theta_b": s.theta_b}

    def progeny():
        v = float(oracles.progeny_pmf(oracles.GWSpec(2, 0.5), 1)[0])
        return _close(v, 0.25, 1e-15), {"value": v}

    def survival():
        v = oracles.gw_survival(oracles.GWSpec(2, 0.6))
        return _close(v, (2 * 0.6 - 1) / 0.36, 1e-10), {"value": v}

    def z_gap():
        v = z_of_rho(g4, 2, nodes=512).z
        return _close(v, 0.4, 1e-9), {"value": v}

    def z2_uniform():
        v = float(propagate(u, 2, 1.0, 2, nodes=512)[0][2])
        return _close(v, 0.3125, 1e-10), {"value": v}

    def gap_amplitudes():
        a = amplitudes(g5, 2, 1.0, nodes=512)
        ok = _close(a.tau, 0.5, 1e-9) and _close(a.c, 2 * math.sqrt(2), 1e-6) and _close(a.tee, 16.0, 1e-5)
        return ok, {"tau": a.tau, "c": a.c, "tee": a.tee}

    def verdicts():
        got = (
            str(percolation_verdict(uniform_measure(0, 0.4), 2)),
            str(percolation_verdict(u, 3)),
            str(percolation_verdict(standard_gap(2, 0.6), 2)),
        )
        return got == ("finite_always", "inconclusive", "infinite_for_large_v"), {"verdicts": got}

    def critical_alpha():
        a = find_critical_alpha(gap_family(), nodes=512)
        return _close(a, 0.5, 1e-8), {"alpha": a}

    add("mass of uniform [0.5, 1]", lambda: (_close(mass(u, 0.5, 1.0), 0.5, 1e-15), {"value": mass(u, 0.5, 1.0)}))
    add("gap leaves [0.2, 0.5) empty", lambda: (mass(g4, 0.2, 0.5, include_right=False) == 0.0, {}))
    add("gap summary", gap_summary)
    add("P(N = 1) at b=2, p=1/2", progeny)
    add("gw survival at p=0.6", survival)
    add("z(gap 0.4) = 0.4", z_gap)
    add("Z_2(1) uniform = 5/16", z2_uniform)
    add("critical gap amplitudes", gap_amplitudes)
    add("verdicts", verdicts)
    add("simulators agree (500 instances)", lambda: (check_simulator_equivalence(500).passed, {}))
    add("critical alpha of the gap family", critical_alpha)
    return out
