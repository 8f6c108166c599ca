import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from mfqueue import nlmp
from mfqueue.dominance import DistOnZ
from mfqueue.oracles import birth_death_marginals, geometric_pmf
from mfqueue.service import make_distribution

EXP = make_distribution("exponential")
LOMAX = make_distribution("lomax", [3.0])
HYPER = make_distribution("hyperexponential", [[0.5, 0.5], [2.0, 2 / 3]])


def small(p, dz=0.02, J=500, k_max=40):
    return nlmp.init_measure_q0(p, k_max=k_max, J=J, dz=dz)


def test_init_examples():
    mu = nlmp.init_measure_q0(DistOnZ.point(0))
    assert mu.empty_mass == 1.0 and mu.busy_mass == 0.0
    mu = nlmp.init_measure_q0(DistOnZ.point(2))
    assert mu.g[1, 0] == 1.0 and mu.mean_customers == 2.0
    assert mu.g.shape == (80, 5000) and mu.dz == 0.01
    mu = nlmp.init_measure_q0(geometric_pmf(0.5, 200), k_max=60)
    assert mu.mean_customers == pytest.approx(1.0, abs=1e-15 * 60)
    assert mu.overflow_mass < 1e-15
    assert mu.total_mass == pytest.approx(1.0, abs=1e-12)


def test_init_rejects_mass_above_k_max():
    with pytest.raises(nlmp.TruncationError):
        nlmp.init_measure_q0(DistOnZ.point(90), k_max=80)


def test_output_rate_examples():
    mu = small(geometric_pmf(0.5, 60))
    assert nlmp.output_rate(mu, EXP) == pytest.approx(mu.busy_mass)
    assert nlmp.output_rate(small([1.0]), LOMAX) == 0.0
    assert nlmp.output_rate(small([0.0, 1.0]), LOMAX) == pytest.approx(1.5)


def test_geometric_start_is_stationary_for_exponential():
    rho = 0.5
    mu0 = small(geometric_pmf(rho, 200), J=1500, k_max=60)
    mu, rt = nlmp.evolve(mu0, EXP, 10.0)
    np.testing.assert_allclose(rt.lam, 0.5, atol=2e-4)
    assert mu.mean_customers == pytest.approx(1.0, abs=1e-9)
    assert 0.5 * np.abs(mu.k_marginal() - mu0.k_marginal()).sum() < 1e-4


def test_empty_measure_is_absorbing():
    mu, rt = nlmp.evolve(small([1.0]), LOMAX, 5.0)
    assert np.all(rt.lam == 0.0)
    assert mu.empty_mass == 1.0


def test_mass_and_rate_bounds_along_trajectory():
    mu0 = small([0.2, 0.3, 0.0, 0.5])
    times = np.round(np.arange(0.02, 6.0, 0.02), 10)
    mu, rt = nlmp.evolve(mu0, LOMAX, 6.0, save_at=times)
    for m in rt.measures.values():
        assert m.total_mass == pytest.approx(1.0, abs=1e-9)
        assert np.all(m.g >= 0) and m.empty_mass >= 0
        assert m.mean_customers == pytest.approx(1.8, abs=1e-9)
    assert len(rt.measures) == len(times)
    assert np.all(rt.lam >= 0) and np.all(rt.lam <= LOMAX.hazard_sup)


@settings(max_examples=12, deadline=None)
@given(p=st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=1, max_size=6).filter(lambda p: sum(p) > 0.1),
       fam=st.sampled_from(["exp", "lomax", "hyper"]))
def test_mean_is_conserved(p, fam):
    d = {"exp": EXP, "lomax": LOMAX, "hyper": HYPER}[fam]
    p = np.array(p) / sum(p)
    mu0 = small(p, J=200)
    mu, rt = nlmp.evolve(mu0, d, 2.0)
    assert abs(mu.mean_customers - mu0.mean_customers) < 1e-9
    assert mu.total_mass == pytest.approx(1.0, abs=1e-9)
    assert rt.lam.max() <= d.hazard_sup


def test_mean_drift_at_two_resolutions():
    # the scheme conserves the mean exactly, so the drift is at rounding level on both grids
    for dz in (0.02, 0.01):
        mu0 = nlmp.init_measure_q0([0.0, 1.0], dz=dz, J=int(10 / dz), k_max=40)
        mu, _ = nlmp.evolve(mu0, LOMAX, 5.0)
        assert abs(mu.mean_customers - 1.0) < 1e-12


def test_second_order_in_dz():
    def marg(dz):
        mu0 = nlmp.init_measure_q0([0.0, 0.0, 1.0], dz=dz, J=int(6 / dz) + 2, k_max=40)
        return nlmp.evolve(mu0, LOMAX, 4.0)[0].k_marginal()

    ref = marg(0.005)
    e1 = 0.5 * np.abs(marg(0.04) - ref).sum()
    e2 = 0.5 * np.abs(marg(0.02) - ref).sum()
    assert e1 / e2 > 3.0


def test_matches_birth_death_ode():
    mu0 = nlmp.init_measure_q0([0.0, 0.0, 1.0], dz=0.02, J=300, k_max=60)
    times = [1.0, 3.0, 5.0]
    _, rt = nlmp.evolve(mu0, EXP, 5.0, save_at=times)
    ode = birth_death_marginals([0, 0, 1.0], times, k_max=60)
    for i, t in enumerate(times):
        assert 0.5 * np.abs(rt.measures[t].k_marginal() - ode[i]).sum() < 1e-4


def test_evolve_errors():
    mu0 = small([0.0, 1.0])
    with pytest.raises(nlmp.CFLError):
        nlmp.evolve(mu0, LOMAX, 1.0, dt=0.01)
    coarse = nlmp.init_measure_q0([0.0, 1.0], dz=0.1, J=50)
    with pytest.raises(nlmp.CFLError):
        nlmp.evolve(coarse, LOMAX, 1.0)
    with pytest.raises(ValueError):
        nlmp.evolve(mu0, LOMAX, 1.01)
    tight = nlmp.init_measure_q0([0.0, 0.0, 0.0, 1.0], dz=0.02, J=500, k_max=4)
    with pytest.raises(nlmp.TruncationError):
        nlmp.evolve(tight, EXP, 5.0)
    short = nlmp.init_measure_q0([0.0, 1.0], dz=0.02, J=20)
    with pytest.raises(nlmp.TruncationError):
        nlmp.evolve(short, LOMAX, 2.0)


def test_continuation_matches_single_run():
    mu0 = small([0.0, 1.0])
    full, rt = nlmp.evolve(mu0, HYPER, 4.0)
    half, rt1 = nlmp.evolve(mu0, HYPER, 2.0)
    again, rt2 = nlmp.evolve(half, HYPER, 2.0, rate0=rt1.lam[-1], t0=2.0)
    np.testing.assert_allclose(again.g, full.g, atol=1e-15)
    np.testing.assert_allclose(np.concatenate([rt1.lam, rt2.lam]), rt.lam, atol=1e-13)
    assert rt2.times[0] == pytest.approx(2.0)


def test_fixed_point_residual_invariant():
    tol = 5e-3
    fp = nlmp.fixed_point(1.0, EXP, tol=tol)
    assert fp.residual < tol
    assert fp.measure.mean_customers == pytest.approx(1.0, abs=tol)
    later, _ = nlmp.evolve(fp.measure, EXP, 10.0, rate0=fp.rate)
    assert 0.5 * np.abs(later.k_marginal() - fp.measure.k_marginal()).sum() < 2 * tol


def test_fixed_point_reports_non_convergence():
    with pytest.raises(nlmp.ConvergenceError) as err:
        nlmp.fixed_point(1.0, EXP, tol=1e-6, max_T=20.0, dz=0.02)
    assert err.value.residual > 1e-6
    with pytest.raises(ValueError):
        nlmp.fixed_point(0.0, EXP)


def test_q0_start():
    np.testing.assert_allclose(nlmp.q0_start(1.0), [0, 1, 0])
    p = nlmp.q0_start(2.25)
    assert p @ np.arange(len(p)) == pytest.approx(2.25)


def test_solve_lambda_exponential():
    assert nlmp.solve_lambda(1.0, EXP) == pytest.approx(0.5, abs=1e-9)
    assert nlmp.solve_lambda(1e-8, EXP) < 1e-7
    for a in (0.3, 2.0, 9.0):
        assert nlmp.solve_lambda(a, EXP) == pytest.approx(a / (1 + a), abs=1e-9)


def test_solve_lambda_lomax():
    # rho + 2 rho^2 / (1 - rho) = 1  <=>  rho^2 + 2 rho - 1 = 0
    assert nlmp.solve_lambda(1.0, LOMAX) == pytest.approx(math.sqrt(2) - 1, abs=1e-9)


def test_solve_lambda_hyperexponential_against_quadrature():
    m2 = integrate.quad(lambda t: t * t * HYPER.pdf(t), 0, np.inf)[0]
    rho = nlmp.solve_lambda(1.0, HYPER)
    assert rho + rho**2 * m2 / (2 * (1 - rho)) == pytest.approx(1.0, abs=1e-8)
    assert rho == pytest.approx((math.sqrt(5) - 1) / 2 - 0.146, abs=1e-3)


def constant_rate(lam, T, dt=0.01):
    n = int(round(T / dt))
    return nlmp.RateTrajectory(np.arange(n) * dt, np.full(n, lam), dt)


def test_lemma_delta_constant_rates():
    rep = nlmp.lemma_delta_check(constant_rate(0.5, 20), 10.0, 1.0)
    assert rep.max_integral == pytest.approx(5.0) and rep.passed
    rep = nlmp.lemma_delta_check(constant_rate(1.5, 20), 10.0, 1.0)
    assert rep.max_integral == pytest.approx(15.0) and not rep.passed
    assert nlmp.smallest_passing_window(constant_rate(0.5, 20), 1.0, [1, 2, 3, 5, 10]) == 3


def test_lemma_delta_needs_long_trajectory():
    with pytest.raises(ValueError):
        nlmp.lemma_delta_check(constant_rate(0.5, 5), 10.0, 1.0)


def test_poisson_count_dist():
    assert nlmp.poisson_count_dist(constant_rate(0.0, 10), 10.0) == DistOnZ([1.0])
    d = nlmp.poisson_count_dist(constant_rate(0.5, 10), 10.0)
    np.testing.assert_allclose(d.as_array()[:20], stats.poisson.pmf(np.arange(20), 5.0), atol=1e-12)
    _, rt = nlmp.evolve(small([0.0, 1.0]), LOMAX, 3.0)
    d = nlmp.poisson_count_dist(rt, 3.0)
    assert float(d.mean()) == pytest.approx(rt.lam.sum() * rt.dt, abs=1e-9)


def test_rate_integral_partial_steps():
    rt = nlmp.RateTrajectory(np.array([0.0, 1.0, 2.0]), np.array([1.0, 2.0, 4.0]), 1.0)
    assert rt.integral(0.0, 3.0) == pytest.approx(7.0)
    assert rt.integral(0.5, 1.5) == pytest.approx(1.5)
    assert rt.integral(2.25, 2.75) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        rt.integral(0.0, 4.0)


def test_measure_serialization_roundtrip():
    mu, rt = nlmp.evolve(small([0.1, 0.6, 0.3]), HYPER, 1.0)
    d = json.loads(mu.to_json(header={"seed": 1}))
    assert d["header"] == {"seed": 1}
    back = nlmp.MeasureGrid.from_dict(d)
    np.testing.assert_array_equal(back.g, mu.g)
    assert back.empty_mass == mu.empty_mass
    lines = rt.to_csv(header={"x": 1}).splitlines()
    assert lines[0] == '# {"x": 1}' and lines[1] == "t,lambda" and len(lines) == 2 + len(rt.lam)


def test_from_empirical():
    mu = nlmp.MeasureGrid.from_empirical([0, 1, 3, 1], [0.0, 0.104, 2.0, 0.0], k_max=5, J=300, dz=0.01)
    assert mu.empty_mass == 0.25
    assert mu.g[0, 10] == 0.25 and mu.g[0, 0] == 0.25 and mu.g[2, 200] == 0.25
    assert mu.mean_customers == pytest.approx(5 / 4)
