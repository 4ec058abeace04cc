import math

import numpy as np
import pytest
from scipy import integrate as sci_integrate

from crit_avalanche import oracles
from crit_avalanche.grid import GridError, GridFunction, hat_integrals, kernel_matrix
from crit_avalanche.measures import MeasureError, NotFlatError, piecewise_measure, ramp_measure, standard_gap, summary, uniform_measure
from crit_avalanche.survival import (
    chi_details,
    chi_quadrature,
    conditioned_density,
    expect_shifted,
    propagate,
    psi,
    psi_profile,
    z_of_rho,
)

U = uniform_measure(0.0, 1.0)
GAP4 = standard_gap(2, 0.4)
NODES = 1024


# --- grid carrier ---------------------------------------------------------


def test_grid_function_interpolation_and_bounds():
    f = GridFunction(1.0, 2.0, np.array([0.0, 1.0, 4.0]))
    assert f(1.25) == pytest.approx(0.5)
    assert f(2.0) == 4.0
    with pytest.raises(GridError):
        f(2.5)
    with pytest.raises(GridError):
        f(0.5)
    g = GridFunction(1.0, 2.0, np.array([0.0, 1.0, 4.0]), below=0.0)
    assert g(0.5) == 0.0


def test_hat_integrals_sum_to_length():
    w = hat_integrals(1.0, 3.0, 101, 1.3, 2.7)
    assert w.sum() == pytest.approx(1.4, abs=1e-14)


def test_kernel_matrix_against_scipy_quad():
    # M[0, i] = int hat_i(q) phi(q - 0.7) dq for the ramp measure
    m = ramp_measure()
    lo, hi, n = 0.5, 2.0, 7
    M = kernel_matrix(m, lo, hi, n, 1.0, [-0.7])
    xs = np.linspace(lo, hi, n)
    h = xs[1] - xs[0]
    for i in range(n):
        hat = lambda q, i=i: max(0.0, 1 - abs(q - xs[i]) / h)
        ref = sci_integrate.quad(lambda q: hat(q) * m.density(q - 0.7), lo, hi, points=list(xs) + [0.7, 1.7], limit=200)[0]
        assert M[0, i] == pytest.approx(ref, abs=1e-12)


# --- propagate ------------------------------------------------------------


def test_theta_below_one_gives_zero():
    Z, _ = propagate(U, 2, 0.9, 5, NODES)
    assert np.all(Z == 0.0)


def test_uniform_exact_values():
    Z, _ = propagate(U, 2, 1.0, 3)
    assert Z[0] == 1.0
    assert Z[1] == pytest.approx(0.5, abs=1e-15)
    assert Z[2] == pytest.approx(0.3125, abs=1e-12)  # 5/16 by direct integration
    assert Z[3] == pytest.approx(79 / 384, abs=1e-7)  # exact triple integral


def test_gap_survival_is_geometric():
    for theta in (1.0, 1.3, 1.6):
        Z, _ = propagate(GAP4, 2, theta, 12, NODES)
        assert np.allclose(Z, 0.4 ** np.arange(13), rtol=1e-6, atol=0)


def test_rejects_atoms_and_far_theta():
    with pytest.raises(NotFlatError):
        propagate(piecewise_measure([(0.0, 1.0, 0.5, 0.5)], [(0.9, 0.5)]), 2, 1.0, 3)
    with pytest.raises(MeasureError):
        propagate(U, 2, 10.0, 3)


def test_monotone_in_theta_and_mass_non_increasing():
    thetas = np.linspace(1.0, 2.0, 9)
    Zs = np.array([propagate(U, 2, t, 8, NODES)[0] for t in thetas])
    assert np.all(np.diff(Zs, axis=0) >= -1e-12)
    assert np.all(np.diff(Zs, axis=1) <= 1e-15)


def test_sub_and_super_multiplicativity():
    Z1, _ = propagate(U, 2, 1.0, 40, NODES)
    Zb, _ = propagate(U, 2, summary(U, 2).theta_b, 40, NODES)
    for n in range(1, 21):
        for m in range(1, 41 - n):
            assert Z1[n + m] >= Z1[n] * Z1[m] * (1 - 1e-9)
            assert Zb[n + m] <= Zb[n] * Zb[m] * (1 + 1e-9)


def test_density_mass_matches_z():
    Z, sd = propagate(ramp_measure(), 2, 1.2, 6, NODES)
    assert sd.mass == pytest.approx(Z[6])
    assert sd.density.integral() == pytest.approx(Z[6], rel=1e-4)


@pytest.mark.parametrize("measure, theta", [(U, 1.0), (GAP4, 1.0), (ramp_measure(), 1.5)])
def test_propagate_vs_path_monte_carlo(measure, theta):
    Z, _ = propagate(measure, 2, theta, 20, NODES)
    N = 1_000_000
    est, _ = oracles.mc_z_path(measure, 2, theta, 20, N, seed=21)
    sigma = np.sqrt(Z * (1 - Z) / N)  # binomial spread under the grid value
    for n in range(1, 21):
        assert abs(Z[n] - est[n]) <= 4 * sigma[n]


# --- conditioned density --------------------------------------------------


def test_conditioned_density_is_normalized():
    sd = conditioned_density(U, 2, 1.0, 5, NODES)
    assert sd.density.integral() == pytest.approx(1.0, abs=1e-10)


def test_conditioned_density_spike_at_n0():
    sd = conditioned_density(U, 2, 1.2, 0, NODES)
    assert sd.degenerate
    assert sd.density.x[np.argmax(sd.density.values)] == pytest.approx(1.2, abs=sd.density.spacing)


def test_conditioned_density_support_for_gap():
    sd = conditioned_density(GAP4, 2, 1.0, 30, NODES)
    x, v = sd.density.x, sd.density.values
    assert np.all(v[x > summary(GAP4, 2).theta_b + sd.density.spacing] == 0)


def test_conditioning_on_nothing_is_rejected():
    with pytest.raises(MeasureError):
        conditioned_density(U, 2, 0.5, 2, NODES)


# --- z --------------------------------------------------------------------


def test_z_gap_and_empty_top():
    est = z_of_rho(GAP4, 2)
    assert est.z == pytest.approx(0.4, abs=1e-6)
    z, hw = z_of_rho(uniform_measure(0.0, 0.4), 2)
    assert (z, hw) == (0.0, 0.0)


def test_z_uniform_bracket_and_refinement():
    est = z_of_rho(U, 2)
    fine = z_of_rho(U, 2, nodes=8192)
    assert 0 < est.z < 1
    assert est.bracket[0] <= est.z + 1e-9
    assert abs(fine.z - est.z) < 1e-7
    # bracket Z_n(1)^(1/n) <= z <= Z_n(theta)^(1/n) for theta above theta_b
    Z1, _ = propagate(U, 2, 1.0, 30)
    Zh, _ = propagate(U, 2, 2.0 + 1e-9, 30, theta_max=3.0)
    for n in (5, 10, 30):
        assert Z1[n] ** (1 / n) <= est.z + 1e-9 <= Zh[n] ** (1 / n) + 2e-9


def test_z_uniform_vs_monte_carlo_ratio():
    est = z_of_rho(U, 2)
    e, se = oracles.mc_z_path(U, 2, 1.0, 20, 4_000_000, seed=99)
    # Z_20 / Z_19 from the same paths; its standard error is close to that of a binomial ratio
    r = e[20] / e[19]
    r_se = math.sqrt(r * (1 - r) / (e[19] * 4_000_000))
    Z, _ = propagate(U, 2, 1.0, 20)
    assert abs(Z[20] / Z[19] - est.z) < 1e-6
    assert abs(r - est.z) < 4 * r_se


def test_z_monotone_along_gap_family():
    zs = [z_of_rho(standard_gap(2, p), 2, nodes=NODES).z for p in (0.2, 0.3, 0.45, 0.6)]
    assert zs == sorted(zs)


# --- psi ------------------------------------------------------------------


def test_psi_gap_is_one():
    f = psi(GAP4, 2, nodes=NODES)
    x = f.x
    assert np.all(np.abs(f.values[x <= 1.9] - 1.0) < 1e-8)
    assert f(0.5) == 0.0


def test_psi_uniform_non_decreasing_and_eigenvalue():
    prof = psi_profile(U, 2, nodes=NODES)
    assert np.all(np.diff(prof.psi.values) >= -1e-12)
    # two discretizations of the same operator agree to the grid accuracy
    assert prof.z == pytest.approx(z_of_rho(U, 2, nodes=NODES).z, abs=1e-6)


def test_psi_limit_of_normalized_survival():
    est = z_of_rho(U, 2)
    f = psi(U, 2)
    Z, _ = propagate(U, 2, 1.5, 60)
    assert Z[60] / est.z**60 == pytest.approx(f(1.5), rel=1e-5)


def test_expect_shifted_against_scipy():
    f = GridFunction(1.0, 2.0, np.linspace(1.0, 3.0, 11), below=0.0)
    ref = sci_integrate.quad(lambda x: f(x + 0.8) * 2 * x, 0.2, 1.0, points=[0.2 + k / 10 for k in range(9)])[0]
    assert expect_shifted(ramp_measure(), f, 0.8) == pytest.approx(ref, rel=1e-10)


# --- chi ------------------------------------------------------------------


def test_chi_gap_examples():
    assert chi_quadrature(GAP4, 2, 1.0) == pytest.approx(5.0, abs=1e-4)
    assert chi_quadrature(GAP4, 2, 0.1) == 0.0  # X + 0.1 < 1 always
    r = chi_details(standard_gap(2, 0.5), 2, 1.0, nodes=NODES)
    assert r.diverged and math.isinf(r.value)


def test_chi_gap_partial_root_probability():
    # v = 0.7: root topples with probability 0.4, then a p = 0.4 cluster
    assert chi_quadrature(GAP4, 2, 0.7, nodes=NODES) == pytest.approx(
        oracles.gap_chi(2, 0.4, 0.4), rel=1e-6
    )


def test_chi_subcritical_mixture_matches_monte_carlo():
    from crit_avalanche import dynamics
    from crit_avalanche.measures import mix

    m = mix(uniform_measure(0.0, 0.45), U, 0.5)
    assert z_of_rho(m, 2, nodes=NODES).z < 0.5
    chi = chi_quadrature(m, 2, 0.8, nodes=NODES)
    res = dynamics.mc_chi_and_survival(m, 2, 0.8, 400_000, 400, seed=4)
    assert res.trunc_frac == 0.0
    assert abs(res.mean_size - chi) < 4 * res.stderr
