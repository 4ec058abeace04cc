import math

import numpy as np
import pytest

from crit_avalanche import dynamics
from crit_avalanche.criticality import (
    FINITE,
    INCONCLUSIVE,
    INFINITE,
    MARGINAL,
    MixtureFamily,
    amplitudes,
    beta_scan,
    delta_scan,
    find_critical_alpha,
    fit_power_law,
    fit_supercritical,
    gamma_scan,
    gap_parameters,
    percolation_verdict,
)
from crit_avalanche.measures import MeasureError, gap_measure, piecewise_measure, standard_gap, uniform_measure
from crit_avalanche.survival import chi_quadrature, z_of_rho

NODES = 1024
GAP_FAM = MixtureFamily(standard_gap(2, 0.3), standard_gap(2, 0.7), 2)
MIXED_FAM = MixtureFamily(standard_gap(2, 0.3), uniform_measure(0.0, 1.0), 2)


@pytest.fixture(scope="module")
def mixed_alpha_star():
    return find_critical_alpha(MIXED_FAM)


# --- fits -----------------------------------------------------------------


def test_power_law_fit_recovers_synthetic_law():
    x = np.geomspace(1, 1e4, 30)
    fit = fit_power_law(x, 3.0 * x**-0.7, window=(10, 1e4))
    assert fit.exponent == pytest.approx(-0.7, abs=1e-12)
    assert fit.amplitude == pytest.approx(3.0, rel=1e-12)
    assert fit.r2 == pytest.approx(1.0) and fit.window == (10, 1e4)
    assert fit.points == np.sum((x >= 10) & (x <= 1e4))


def test_power_law_fit_needs_three_points():
    with pytest.raises(MeasureError):
        fit_power_law([1.0, 2.0], [1.0, 0.5])


def test_supercritical_fit_on_branching_survival():
    from crit_avalanche.oracles import GWSpec, gw_survival

    eps = np.linspace(0.005, 0.05, 10)
    s = np.array([gw_survival(GWSpec(2, 0.5 + e)) for e in eps])
    fit = fit_supercritical(eps, s, 1e-4 * s)
    assert fit.exponent == pytest.approx(1.0, abs=0.01)
    assert fit.amplitude_nominal == pytest.approx(8.0, rel=0.01)


# --- critical point -------------------------------------------------------


def test_critical_alpha_of_gap_family():
    tol = 1e-9
    a = find_critical_alpha(GAP_FAM, tol=tol, nodes=NODES)
    assert a == pytest.approx(0.5, abs=tol / 0.4)
    assert abs(z_of_rho(GAP_FAM.member(a), 2, nodes=NODES).z - 0.5) < tol


def test_critical_alpha_rejects_non_straddling():
    fam = MixtureFamily(standard_gap(2, 0.3), standard_gap(2, 0.4), 2)
    with pytest.raises(MeasureError, match="0.3.*0.4"):
        find_critical_alpha(fam, nodes=NODES)


def test_critical_alpha_of_mixed_family(mixed_alpha_star):
    assert abs(z_of_rho(MIXED_FAM.member(mixed_alpha_star), 2).z - 0.5) < 1e-9


# --- gamma ----------------------------------------------------------------


def test_gamma_scan_on_gap_family():
    zs = np.linspace(0.40, 0.49, 10)
    res = gamma_scan(GAP_FAM, 1.0, (zs - 0.3) / 0.4, nodes=NODES, alpha_star=0.5)
    assert res.fit.exponent == pytest.approx(-1.0, abs=0.02)
    assert np.allclose(res.product, 0.5, rtol=1e-6)
    assert res.tau_formula == pytest.approx(0.5, rel=1e-6)


def test_gamma_scan_on_mixed_family(mixed_alpha_star):
    d = np.geomspace(0.01, 0.1, 8)
    alphas = mixed_alpha_star * (1 - d / 0.2)  # z is roughly linear in alpha between 0.3 and 0.5
    res = gamma_scan(MIXED_FAM, 1.0, alphas, alpha_star=mixed_alpha_star)
    assert res.fit.exponent == pytest.approx(-1.0, abs=0.05)
    # chi (z_c - z) approaches tau from above as z -> z_c
    assert res.product[np.argmax(res.z)] == pytest.approx(res.tau_formula, rel=0.02)


def test_gamma_scan_rejections():
    with pytest.raises(MeasureError):
        gamma_scan(GAP_FAM, 1.0, [0.2], nodes=NODES)
    with pytest.raises(MeasureError, match="not subcritical"):
        gamma_scan(GAP_FAM, 1.0, [0.1, 0.2, 0.9], nodes=NODES)


# --- delta ----------------------------------------------------------------


def test_delta_scan_rejects_non_critical():
    with pytest.raises(MeasureError, match="critical"):
        delta_scan(standard_gap(2, 0.45), 2, 1.0, 1000, 1, nodes=NODES)


def test_delta_exponents_agree_across_critical_measures(mixed_alpha_star):
    gap = delta_scan(standard_gap(2, 0.5), 2, 1.0, 1_000_000, seed=31)
    mixed = delta_scan(MIXED_FAM.member(mixed_alpha_star), 2, 1.0, 1_000_000, seed=32)
    assert gap.fit.stderr_kind == "batch_means"
    assert mixed.oracle_ratio is None and gap.oracle_ratio is not None
    joint = math.hypot(gap.fit.stderr, mixed.fit.stderr)
    # 4 joint standard errors, the convention used for every Monte Carlo comparison here
    assert abs(gap.fit.exponent - mixed.fit.exponent) < 4 * joint
    assert mixed.fit.exponent == pytest.approx(-0.5, abs=0.03)


# --- beta -----------------------------------------------------------------


def test_beta_scan_rejections():
    with pytest.raises(MeasureError):
        beta_scan(GAP_FAM, 1.0, [], nodes=NODES)
    with pytest.raises(MeasureError, match="not supercritical"):
        beta_scan(GAP_FAM, 1.0, [0.6, 0.4], samples=100, nodes=NODES)
    with pytest.raises(MeasureError):
        beta_scan(GAP_FAM, 1.0, [0.6], depth_proxy=100, nodes=NODES)


# --- amplitudes -----------------------------------------------------------


def test_critical_gap_amplitudes():
    a = amplitudes(standard_gap(2, 0.5), 2, 1.0)
    assert a.tau == pytest.approx(0.5, abs=1e-9)
    assert a.theta == pytest.approx(2 * math.sqrt(2) / math.sqrt(math.pi), rel=1e-6)
    assert a.tee == pytest.approx(16.0, rel=1e-6)


def test_tau_with_partial_root_probability():
    # v = 0.7 on a gap measure: the root topples with probability p, so tau = p / b
    a = amplitudes(standard_gap(2, 0.5), 2, 0.7, nodes=NODES)
    assert a.tau == pytest.approx(0.25, abs=1e-9)


def test_theta_and_tee_need_criticality():
    a = amplitudes(standard_gap(2, 0.4), 2, 1.0, nodes=NODES)
    assert math.isnan(a.theta) and math.isnan(a.tee)
    assert a.tau == pytest.approx(0.5, abs=1e-9)


def test_gap_parameters_detects_binomial_clusters():
    assert gap_parameters(standard_gap(2, 0.4), 2, 1.0) == pytest.approx((0.4, 1.0))
    assert gap_parameters(uniform_measure(0.0, 1.0), 2, 1.0) is None


# --- verdicts -------------------------------------------------------------


def test_percolation_verdict_examples():
    assert percolation_verdict(gap_measure(2, 0.8, 0.6, 0.01), 2).outcome == INFINITE
    v = percolation_verdict(uniform_measure(0.0, 0.4), 2)
    assert v.outcome == FINITE and v.witness["theta_b"] == pytest.approx(0.8)
    assert percolation_verdict(uniform_measure(0.0, 1.0), 3).outcome == INCONCLUSIVE
    assert percolation_verdict(uniform_measure(0.0, 0.5), 2).outcome == MARGINAL


def test_percolation_verdict_second_finite_branch_and_atoms():
    # theta_b > 1 but rho([1 - theta_b/b, 1]) <= 1/b
    m = standard_gap(2, 0.4)
    v = percolation_verdict(m, 2)
    assert v.outcome == FINITE and v.witness["rho_reach"] == pytest.approx(0.4)
    atom = piecewise_measure([(0.0, 0.4, 1.0, 1.0)], [(0.9, 0.6)])
    assert percolation_verdict(atom, 2).outcome == INFINITE


# --- no intermediate phase ------------------------------------------------


def test_divergence_and_survival_bracket_the_same_alpha():
    alphas = [0.475, 0.4875, 0.5, 0.5125]
    chi = [chi_quadrature(GAP_FAM.member(a), 2, 1.0, nodes=NODES) for a in alphas]
    surv = [
        dynamics.mc_chi_and_survival(GAP_FAM.member(a), 2, 1.0, 100_000, 1000, seed=50 + k).survival
        for k, a in enumerate(alphas)
    ]
    a_chi = next(a for a, c in zip(alphas, chi) if math.isinf(c))
    a_surv = next(a for a, s in zip(alphas, surv) if s > 0)
    assert abs(a_chi - 0.5) <= 0.01 and abs(a_surv - 0.5) <= 0.01
