"""Command-line runner: ``crit-avalanche <subcommand> --config <path> [--out <dir>]``.

Every subcommand writes CSV files whose ``#`` header records the resolved
configuration, so a file is enough to re-run its experiment.  Exit status is
0 on success, 2 on a validation error and 3 when a numerical iteration fails
to converge (diagnostics go to ``<subcommand>_diagnostics.txt``).
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import dynamics, fixedpoint, oracles
from .config import ConfigError, ExperimentConfig, load_config
from .criticality import (
    MixtureFamily,
    amplitudes,
    beta_scan,
    delta_scan,
    find_critical_alpha,
    gamma_scan,
    gap_parameters,
    percolation_verdict,
)
from .measures import MeasureError, summary
from .survival import NonConvergence, chi_details, propagate, psi_profile, z_of_rho

SUBCOMMANDS = ("simulate", "zeta", "psi", "psi-v", "qinf", "binf", "chi", "critical", "exponents", "oracle", "verdict")
SCANS = ("gamma", "delta", "beta", "all")


def _cell(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if x is None:
        return ""
    return str(x)


class Sink:
    """Writes the CSV files of one run in a fixed order."""

    def __init__(self, out_dir: str, sub: str, cfg: ExperimentConfig):
        self.out_dir = out_dir
        self.sub = sub
        self.cfg = cfg
        os.makedirs(out_dir, exist_ok=True)

    def write(self, name: str, columns, rows, notes=()):
        lines = [f"# crit-avalanche {self.sub}"]
        lines += [f"# {h}" for h in self.cfg.header_lines()]
        lines += [f"# {n}" for n in notes]
        lines.append(",".join(columns))
        lines += [",".join(_cell(x) for x in row) for row in rows]
        path = os.path.join(self.out_dir, name)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
        return path


def _need_measure(cfg, sub):
    if cfg.measure is None:
        raise ConfigError([f"measure.kind: {sub} needs a measure (measure.*)"])
    return cfg.measure


def _need_family(cfg, sub):
    if cfg.family is None:
        raise ConfigError([f"family.rho0.kind: {sub} needs a family (family.rho0.*, family.rho1.*)"])
    return MixtureFamily(cfg.family[0], cfg.family[1], cfg["b"])


def _need(cfg, key, sub):
    if cfg[key] is None:
        raise ConfigError([f"{key}: required for {sub}"])
    return cfg[key]


# ---------------------------------------------------------------------------
# subcommands


def _simulate(cfg, sink):
    m = _need_measure(cfg, "simulate")
    b, v, seed, w = cfg["b"], cfg["v"], cfg["seed"], cfg["workers"]
    tail = dynamics.mc_tail(m, b, v, cfg["samples"], cfg["depth_cap"], seed, w, cfg["simulate.size_cap"])
    k = min(cfg["simulate.n_max"], tail.n.size)
    notes = [f"truncated_runs = {tail.truncated}", f"lower_bound_from = {tail.lower_bound_from}"]
    sink.write("simulate_tail.csv", ("n", "p_ge_n", "stderr"), zip(tail.n[:k], tail.p_ge_n[:k], tail.stderr[:k]), notes)
    cs = dynamics.mc_chi_and_survival(m, b, v, cfg["samples"], cfg["depth_cap"], seed, w)
    sink.write(
        "simulate_summary.csv",
        ("mean_size", "stderr", "trunc_frac", "survival", "survival_stderr"),
        [(cs.mean_size, cs.stderr, cs.trunc_frac, cs.survival, cs.survival_stderr)],
    )


def _zeta(cfg, sink):
    m = _need_measure(cfg, "zeta")
    b, nodes, n = cfg["b"], cfg["grid.nodes"], cfg["zeta.n"]
    est = z_of_rho(m, b, tol=cfg["zeta.tol"], nodes=nodes)
    tb = summary(m, b).theta_b
    Z1, _ = propagate(m, b, 1.0, n, nodes)
    Zb, _ = propagate(m, b, tb, n, nodes)
    rows = []
    for k in range(1, n + 1):
        r1 = Z1[k] / Z1[k - 1] if Z1[k - 1] > 0 else 0.0
        r2 = Zb[k] / Zb[k - 1] if Zb[k - 1] > 0 else 0.0
        rows.append((k, Z1[k], Zb[k], r1, r2))
    sink.write("zeta.csv", ("n", "Z_theta1", "Z_thetab", "ratio1", "ratio2"), rows)
    sink.write(
        "zeta_summary.csv",
        ("z", "half_width", "theta_gap", "bracket_lo", "bracket_hi", "iterations"),
        [(est.z, est.half_width, est.theta_gap, est.bracket[0], est.bracket[1], est.n)],
    )


def _psi(cfg, sink):
    m = _need_measure(cfg, "psi")
    s = summary(m, cfg["b"])
    prof = psi_profile(m, cfg["b"], theta_hi=s.x_star + cfg["v"], nodes=cfg["grid.nodes"])
    sink.write("psi.csv", ("theta", "psi"), zip(prof.psi.x, prof.psi.values), [f"z = {_cell(prof.z)}"])


def _psi_v(cfg, sink):
    m = _need_measure(cfg, "psi-v")
    seq = fixedpoint.psi_sequence(
        m, cfg["b"], cfg["fp.theta_max"], cfg["grid.nodes"], cfg["fp.n_max"], cfg["fp.eps"], cfg["fp.tol"]
    )
    hi = seq.iterates[0].hi
    thetas = np.linspace(0.0, hi, cfg["psi_v.points"])
    rows = []
    for n, fn in enumerate(seq.iterates):
        rows.extend((n, t, y) for t, y in zip(thetas, fn(thetas)))
    sink.write("psi_v.csv", ("n", "theta", "psi_n"), rows)
    sink.write(
        "psi_v_summary.csv",
        ("verdict", "threshold", "residual", "iterations"),
        [(seq.verdict, seq.threshold, seq.residual, len(seq.iterates) - 1)],
    )


def _qinf(cfg, sink):
    m = _need_measure(cfg, "qinf")
    q = fixedpoint.q_infinity(m, cfg["b"], nodes=cfg["grid.nodes"], tol=cfg["fp.tol"])
    sink.write("qinf.csv", ("q", "density"), zip(q.density.x, q.density.values))
    sink.write("qinf_summary.csv", ("z_hat", "residual", "iters"), [(q.z_hat, q.residual, q.iterations)])


def _binf(cfg, sink):
    m = _need_measure(cfg, "binf")
    b, lam, nodes = cfg["b"], cfg["lambda"], cfg["binf.nodes"]
    B = fixedpoint.b_infinity(m, b, lam, nodes=nodes, tol=cfg["fp.tol"])
    q = fixedpoint.q_infinity(m, b, nodes=nodes, tol=cfg["fp.tol"])
    kappa, b_star = fixedpoint.kappa_and_bstar(m, b, lam, q, B)
    sink.write("binf.csv", ("theta", "B"), zip(B.x, B.values))
    sink.write("binf_summary.csv", ("lambda", "B_at_1", "kappa", "b_star"), [(lam, B(1.0), kappa, b_star)])


def _chi(cfg, sink):
    m = _need_measure(cfg, "chi")
    r = chi_details(m, cfg["b"], cfg["v"], tol=cfg["zeta.tol"], nodes=cfg["grid.nodes"])
    sink.write("chi.csv", ("v", "chi", "ratio", "terms", "diverged"), [(cfg["v"], r.value, r.ratio, r.terms, r.diverged)])


def _critical(cfg, sink):
    fam = _need_family(cfg, "critical")
    b, v, nodes = cfg["b"], cfg["v"], cfg["grid.nodes"]
    a_star = find_critical_alpha(fam, tol=cfg["critical.tol"], nodes=nodes)
    rows = []
    for a in cfg["critical.alphas"]:
        mem = fam.member(a)
        z = z_of_rho(mem, b, tol=cfg["zeta.tol"], nodes=nodes).z
        chi = chi_details(mem, b, v, tol=cfg["zeta.tol"], nodes=nodes).value
        prod = math.inf if math.isinf(chi) else chi * (1.0 / b - z)
        rows.append((a, z, chi, prod))
    sink.write("critical.csv", ("alpha", "z", "chi", "product"), rows)
    crit = fam.member(a_star)
    z_star = z_of_rho(crit, b, tol=cfg["zeta.tol"], nodes=nodes).z
    tau = amplitudes(crit, b, v, nodes).tau
    sink.write("critical_summary.csv", ("alpha_star", "z_star", "tau_formula"), [(a_star, z_star, tau)])


def _ratio(a, b):
    if a is None or b is None or not (isinstance(b, float) and b != 0 and math.isfinite(b)):
        return None
    return a / b


def _exponents(cfg, sink, scan):
    b, v, nodes, seed, w = cfg["b"], cfg["v"], cfg["grid.nodes"], cfg["seed"], cfg["workers"]
    scans = ("gamma", "delta", "beta") if scan == "all" else (scan,)
    # validate what every requested scan needs before running any of them
    fam = None
    if "gamma" in scans or "beta" in scans:
        fam = _need_family(cfg, f"exponents --scan {scan}")
    if "gamma" in scans:
        _need(cfg, "gamma.alphas", "exponents --scan gamma")
    if "beta" in scans:
        _need(cfg, "beta.alphas", "exponents --scan beta")
    if "delta" in scans:
        m = _need_measure(cfg, "exponents --scan delta")
        z = z_of_rho(m, b, tol=cfg["zeta.tol"], nodes=nodes).z
        if abs(z - 1.0 / b) >= 1e-4:
            raise MeasureError(f"delta scan needs a critical measure; z = {z:.6g}, 1/b = {1.0 / b:.6g}")
    summary_rows = []
    a_star = find_critical_alpha(fam, nodes=nodes) if fam is not None else None
    if "gamma" in scans:
        g = gamma_scan(fam, v, cfg["gamma.alphas"], nodes=nodes, alpha_star=a_star)
        sink.write("exponents_gamma.csv", ("alpha", "z", "chi", "product"), zip(g.alphas, g.z, g.chi, g.product))
        gp = gap_parameters(fam.member(a_star), b, v)
        oracle = gp[1] / b if gp is not None else None
        summary_rows.append(("gamma", g.fit.exponent, g.fit.stderr, g.fit.amplitude, g.tau_formula, oracle, _ratio(g.tau_formula, oracle)))
    if "delta" in scans:
        d = delta_scan(
            m, b, v, cfg["samples"], seed, cfg["delta.n_lo"], cfg["delta.n_hi"], cfg["delta.points"], w, nodes
        )
        ns = np.unique(np.round(np.geomspace(cfg["delta.n_lo"], cfg["delta.n_hi"], cfg["delta.points"])).astype(int))
        ns = ns[ns <= d.tail.n.size]
        sink.write("exponents_delta.csv", ("n", "p_ge_n", "stderr"), zip(ns, d.tail.p_ge_n[ns - 1], d.tail.stderr[ns - 1]))
        summary_rows.append(("delta", d.fit.exponent, d.fit.stderr, d.fit.amplitude, d.theta_formula, d.oracle_amplitude, d.formula_ratio))
    if "beta" in scans:
        bs = beta_scan(fam, v, cfg["beta.alphas"], cfg["beta.depth_proxy"], cfg["samples"], seed, w, nodes, a_star)
        sink.write("exponents_beta.csv", ("alpha", "z", "survival", "stderr"), zip(bs.alphas, bs.z, bs.survival, bs.stderr))
        summary_rows.append(("beta", bs.fit.exponent, bs.fit.stderr, bs.fit.amplitude_nominal, bs.tee_formula, bs.oracle_slope, bs.formula_ratio))
    sink.write(
        "exponents_summary.csv",
        ("scan", "exponent", "stderr", "amplitude", "formula_value", "oracle_value", "ratio"),
        summary_rows,
        ["ratio = formula_value / oracle_value"],
    )


def _oracle(cfg, sink):
    m = _need_measure(cfg, "oracle")
    b, v = cfg["b"], cfg["v"]
    gp = gap_parameters(m, b, v)
    if gp is not None:
        p, r = gp
        spec = oracles.GWSpec(b, p)
        n_max = cfg["simulate.n_max"]
        tail = r * oracles.otter_dwass_tail(spec, n_max)
        sink.write("oracle_tail.csv", ("n", "p_ge_n", "stderr"), ((n, t, 0.0) for n, t in zip(range(1, n_max + 1), tail)))
        sink.write(
            "oracle_summary.csv",
            ("mean_size", "stderr", "trunc_frac", "survival", "survival_stderr"),
            [(oracles.gap_chi(b, p, r) if r > 0 else 0.0, 0.0, 0.0, r * oracles.gw_survival(spec), 0.0)],
        )
    n = cfg["zeta.n"]
    tb = summary(m, b).theta_b
    e1, _ = oracles.mc_z_path(m, b, 1.0, n, cfg["samples"], cfg["seed"])
    eb, _ = oracles.mc_z_path(m, b, tb, n, cfg["samples"], cfg["seed"] + 1)
    rows = []
    for k in range(1, n + 1):
        r1 = e1[k] / e1[k - 1] if e1[k - 1] > 0 else 0.0
        r2 = eb[k] / eb[k - 1] if eb[k - 1] > 0 else 0.0
        rows.append((k, e1[k], eb[k], r1, r2))
    sink.write("oracle_zeta.csv", ("n", "Z_theta1", "Z_thetab", "ratio1", "ratio2"), rows, ["path Monte Carlo"])


def _verdict(cfg, sink):
    m = _need_measure(cfg, "verdict")
    vd = percolation_verdict(m, cfg["b"])
    w = vd.witness
    sink.write(
        "verdict.csv",
        ("outcome", "theta_b", "x_star", "rho_top", "rho_reach"),
        [(vd.outcome, w["theta_b"], w["x_star"], w["rho_top"], w.get("rho_reach"))],
    )
    print(vd.outcome)


HANDLERS = {
    "simulate": _simulate,
    "zeta": _zeta,
    "psi": _psi,
    "psi-v": _psi_v,
    "qinf": _qinf,
    "binf": _binf,
    "chi": _chi,
    "critical": _critical,
    "oracle": _oracle,
    "verdict": _verdict,
}


def run(subcommand: str, cfg: ExperimentConfig, out_dir: str = ".", scan: str = "all") -> int:
    """Run one subcommand; returns the exit status."""
    sink = Sink(out_dir, subcommand, cfg)
    with open(os.path.join(out_dir, "run.log"), "a", encoding="utf-8") as log:
        log.write(f"{subcommand} seed={cfg['seed']} samples={cfg['samples']} depth_cap={cfg['depth_cap']} workers={cfg['workers']}\n")
    try:
        if subcommand == "exponents":
            _exponents(cfg, sink, scan)
        else:
            HANDLERS[subcommand](cfg, sink)
    except (ConfigError, MeasureError) as e:
        for line in getattr(e, "errors", [str(e)]):
            print(f"error: {line}", file=sys.stderr)
        return 2
    except NonConvergence as e:
        path = os.path.join(out_dir, f"{subcommand.replace('-', '_')}_diagnostics.txt")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{e}\n")
            for k, val in sorted(e.details.items()):
                fh.write(f"{k} = {val}\n")
        print(f"non-convergence: {e} (details in {path})", file=sys.stderr)
        return 3
    return 0


def selftest(level: str = "fast", stream=None) -> int:
    from . import acceptance

    stream = stream or sys.stdout
    if level == "fast":
        results = acceptance.fast_checks()
    else:
        results = [check() for check in acceptance.ACCEPTANCE]
    for r in results:
        print(r.line(), file=stream, flush=True)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed", file=stream)
    return 0 if not failed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crit-avalanche", description="Avalanches on the directed b-ary tree.")
    p.add_argument("subcommand", choices=SUBCOMMANDS + ("selftest",))
    p.add_argument("--config", help="experiment config file (key = value lines)")
    p.add_argument("--out", default=".", help="output directory (default: current directory)")
    p.add_argument("--scan", choices=SCANS, default="all", help="exponents: which scan to run")
    p.add_argument("--level", choices=("fast", "full"), default="fast", help="selftest: check set")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.subcommand == "selftest":
        return selftest(args.level)
    if not args.config:
        print("error: --config is required", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        for line in e.errors:
            print(f"error: {line}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: cannot read config: {e}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    return run(args.subcommand, cfg, args.out, args.scan)


if __name__ == "__main__":
    sys.exit(main())
