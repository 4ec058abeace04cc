import math
import warnings

import numpy as np
import pytest

from crit_avalanche import fixedpoint, oracles
from crit_avalanche.fixedpoint import (
    PERSISTS,
    UNDECIDED,
    VANISHES,
    b_infinity,
    c_rho,
    kappa_and_bstar,
    phi_b,
    psi_sequence,
    q_infinity,
)
from crit_avalanche.grid import GridFunction
from crit_avalanche.measures import MeasureError, NotFlatError, mass, piecewise_measure, ramp_measure, standard_gap, summary, uniform_measure
from crit_avalanche.survival import psi, z_of_rho

U = uniform_measure(0.0, 1.0)
NODES = 1024


def test_phi_b_examples():
    assert phi_b(0.0, 3) == 0.0
    assert phi_b(1.0, 3) == 1.0
    assert phi_b(0.5, 2) == 0.75
    with pytest.raises(ValueError):
        phi_b(1.5, 2)
    with pytest.raises(ValueError):
        phi_b(np.array([0.2, -0.1]), 2)


def test_psi_one_is_tail_mass():
    seq = psi_sequence(U, 2, nodes=NODES, n_max=3)
    assert seq.iterates[1](0.3) == pytest.approx(0.3, abs=1e-14)
    x = seq.iterates[1].x
    exact = [mass(U, min(max(1 - t, 0.0), 1.0), 1.0) if t > 0 else 0.0 for t in x]
    assert np.allclose(seq.iterates[1].values, exact, atol=1e-14, rtol=0)


def test_psi_iterates_are_monotone_distribution_functions():
    seq = psi_sequence(ramp_measure(), 2, nodes=NODES, n_max=40)
    prev = None
    for it in seq.iterates:
        v = it.values
        assert np.all((v >= -1e-15) & (v <= 1 + 1e-15))
        assert np.all(np.diff(v) >= -1e-12)
        if prev is not None:
            assert np.all(v <= prev + 1e-12)
        prev = v


def test_psi_verdicts_on_gap_measures():
    sub = psi_sequence(standard_gap(2, 0.4), 2, nodes=NODES)
    assert sub.verdict == VANISHES and sub.threshold is None
    sup = psi_sequence(standard_gap(2, 0.6), 2)
    assert sup.verdict == PERSISTS
    assert abs(sup.threshold - 0.2) <= sup.iterates[-1].spacing
    assert sup.residual < 10 * 1e-10


def test_psi_critical_is_undecided():
    seq = psi_sequence(standard_gap(2, 0.5), 2, nodes=256, n_max=50)
    assert seq.verdict == UNDECIDED


def test_psi_sequence_rejects_small_domain_and_atoms():
    with pytest.raises(MeasureError):
        psi_sequence(U, 2, theta_max=0.5)
    with pytest.raises(NotFlatError):
        psi_sequence(piecewise_measure([(0.0, 1.0, 0.5, 0.5)], [(0.9, 0.5)]), 2)


@pytest.mark.parametrize("measure", [U, standard_gap(2, 0.4), ramp_measure()])
def test_q_infinity_matches_z_and_is_stationary(measure):
    q = q_infinity(measure, 2)
    assert q.total_mass == pytest.approx(1.0, abs=1e-10)
    assert q.residual < 1e-8
    assert abs(q.z_hat - z_of_rho(measure, 2).z) < 1e-6
    vals, x = q.density.values, q.density.x
    assert np.all(vals[x > summary(measure, 2).theta_b + q.density.spacing] == 0)


def test_q_infinity_gap_value_and_no_atom_at_one():
    q = q_infinity(standard_gap(2, 0.4), 2, nodes=NODES)
    assert q.z_hat == pytest.approx(0.4, abs=1e-6)
    qu = q_infinity(U, 2, nodes=NODES)
    h = qu.density.spacing
    near_one = qu.density.integral(1.0 - h, 1.0 + h)
    assert near_one < 2 * h * np.max(qu.density.values) + 1e-12


def test_q_infinity_initialization_independence():
    a = q_infinity(U, 2, nodes=NODES, init_theta=1.0)
    b = q_infinity(U, 2, nodes=NODES, init_theta=2.0)
    assert np.max(np.abs(a.density.values - b.density.values)) < 1e-9


def test_b_infinity_trivial_cases():
    B = b_infinity(U, 2, 1.0, nodes=128)
    assert np.allclose(B.values, 1.0)
    B = b_infinity(U, 2, 0.01, nodes=128)
    assert B(0.5) == 0.01
    assert np.all(B.values >= 0.01)
    assert np.all(np.diff(B.values) >= -1e-13)
    with pytest.raises(MeasureError):
        b_infinity(U, 2, 1.5)


def test_b_infinity_monotone_in_lambda():
    lo = b_infinity(ramp_measure(), 2, 1e-3, nodes=256).values
    hi = b_infinity(ramp_measure(), 2, 1e-2, nodes=256).values
    assert np.all(hi >= lo)


@pytest.mark.parametrize("p, lam", [(0.4, 0.01), (0.5, 1e-4), (0.6, 1e-3)])
def test_b_infinity_gap_closed_form(p, lam):
    m = standard_gap(2, p)
    B = b_infinity(m, 2, lam, nodes=512)
    u = oracles.gap_external_field(2, p, lam)
    x = B.x
    assert np.max(np.abs(B.values[x <= 1.9] - u)) < 1e-9 * max(1.0, u / lam)


def test_kappa_trivial_and_bounded():
    m = standard_gap(2, 0.4)
    q = q_infinity(m, 2, nodes=256)
    B0 = b_infinity(m, 2, 0.0, nodes=256)
    assert kappa_and_bstar(m, 2, 0.0, q, B0) == (0.0, 0.0)
    B = b_infinity(m, 2, 0.05, nodes=256)
    kappa, _ = kappa_and_bstar(m, 2, 0.05, q, B)
    assert 0 < kappa <= np.max(B.values) ** 2


def test_kappa_rejects_mixed_resolution():
    m = standard_gap(2, 0.4)
    with pytest.raises(MeasureError):
        kappa_and_bstar(m, 2, 0.1, q_infinity(m, 2, nodes=256), b_infinity(m, 2, 0.1, nodes=128))


def test_c_rho_closed_form_and_homogeneity():
    m = standard_gap(2, 0.5)
    q = q_infinity(m, 2)
    f = psi(m, 2)
    c = c_rho(m, 2, q, f)
    assert c == pytest.approx(2 * math.sqrt(2), abs=1e-6)
    assert c_rho(m, 2, q, f.with_values(2 * f.values)) == pytest.approx(c / 2, rel=1e-12)


def test_c_rho_warns_off_criticality():
    m = standard_gap(2, 0.4)
    with pytest.warns(UserWarning):
        c_rho(m, 2, q_infinity(m, 2, nodes=256), psi(m, 2, nodes=256))


def test_external_field_asymptotics_on_critical_gap():
    m = standard_gap(2, 0.5)
    lam = 1e-6
    B = b_infinity(m, 2, lam, nodes=256)
    q = q_infinity(m, 2, nodes=256)
    kappa, _ = kappa_and_bstar(m, 2, lam, q, B)
    assert B(1.0) / math.sqrt(lam) == pytest.approx(2 * math.sqrt(2), rel=0.02)
    assert 0.5 * kappa / lam == pytest.approx(1.0, rel=0.02)
    # c from the formula against the small-lambda limit of B/sqrt(lambda)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        c = c_rho(m, 2, q_infinity(m, 2), psi(m, 2))
    assert B(1.0) / (math.sqrt(lam) * 1.0) == pytest.approx(c, rel=0.03)
