import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfqueue import chaos, network as net, nlmp
from mfqueue.dominance import DistOnZ, empirical_dominance_test
from mfqueue.network import Snapshots
from mfqueue.oracles import compositions, geometric_pmf, product_form_marginal
from mfqueue.service import make_distribution

EXP = make_distribution("exponential")
LOMAX = make_distribution("lomax", [3.0])
TF = chaos.TestFunction


def oracle_snapshots(N, M, n, seed=0):
    """i.i.d. draws from the exact stationary law."""
    comps = np.array(list(compositions(N, M)))
    idx = np.random.default_rng(seed).integers(0, len(comps), n)
    k = comps[idx]
    return Snapshots(k, np.zeros(k.shape), np.arange(n, dtype=float))


def test_test_functions():
    k = np.array([0, 1, 2, 5])
    z = np.array([0.0, 0.3, 4.0, 1.0])
    np.testing.assert_array_equal(TF.k_eq(2)(k), [0, 0, 1, 0])
    np.testing.assert_array_equal(TF.k_le(1)(k), [1, 1, 0, 0])
    np.testing.assert_array_equal(TF.k_value(3)(k), [0, 1, 2, 3])
    np.testing.assert_allclose(TF.bounded_z(2.0)(k, z), [0, 0.3, 2.0, 1.0])
    np.testing.assert_array_equal(TF.constant(-2.5)(k), [-2.5] * 4)
    for f in (TF.k_eq(2), TF.k_le(1), TF.k_value(3), TF.bounded_z(2.0), TF.constant(-2.5)):
        assert np.all(np.abs(f(k, z)) <= f.bound)
    with pytest.raises(ValueError):
        TF.bounded_z(1.0)(k)


@pytest.mark.parametrize("symmetrize", [False, True])
def test_constant_functions_have_zero_gap(symmetrize):
    snaps = net.sample_stationary(5, 7, LOMAX, 300, seed=1)
    est = chaos.poc_estimate(snaps, [TF.constant(3.0), TF.constant(0.7)], symmetrize=symmetrize, n_boot=200)
    assert est.gap == 0.0
    assert est.ci == (0.0, 0.0)


def test_poc_exact_two_node_covariance():
    snaps = oracle_snapshots(2, 2, 20_000)
    f = TF.k_value(2)
    for sym in (False, True):
        est = chaos.poc_estimate(snaps, [f, f], symmetrize=sym, n_boot=300)
        assert abs(est.gap - (-2 / 3)) < 4 * est.se
        assert est.ci[0] < est.gap < est.ci[1]


def test_poc_estimators_agree_with_small_oracle():
    N, M = 3, 3
    law = chaos.exact_small_oracle(N, M)
    exact = sum(p * (c[0] == 0) * (c[1] == 0) for c, p in law.items()) - Fraction(product_form_marginal(N, M, True)[0]) ** 2
    snaps = net.sample_stationary(N, M, EXP, 20_000, seed=4)
    f = TF.k_eq(0)
    for sym in (False, True):
        est = chaos.poc_estimate(snaps, [f, f], symmetrize=sym, n_boot=300)
        assert abs(est.gap - float(exact)) < 4 * est.se


def test_poc_input_validation():
    snaps = oracle_snapshots(3, 2, 50)
    f = TF.k_eq(0)
    with pytest.raises(ValueError):
        chaos.poc_estimate(snaps, [f, f], nodes=[1, 1])
    with pytest.raises(ValueError):
        chaos.poc_estimate(snaps, [f, f, f], symmetrize=True)


def test_loglog_slope():
    Ns = [10, 50, 200]
    assert chaos.loglog_slope(Ns, [-2 / (n + 1) for n in Ns]) == pytest.approx(0.97, abs=0.01)
    assert chaos.loglog_slope(Ns, [3 / n for n in Ns]) == pytest.approx(1.0)


def test_lln_constant_and_single_node():
    runs = {N: oracle_snapshots(N, N, 200, seed=N) for N in (2, 4)}
    rep = chaos.lln_test(runs, TF.constant(1.0))
    assert rep.variances == [0.0, 0.0]
    snaps = oracle_snapshots(2, 2, 500)
    one = Snapshots(snaps.k[:, :1], snaps.z[:, :1], snaps.t)
    rep = chaos.lln_test({1: one}, TF.k_eq(0))
    f = TF.k_eq(0)(one.k[:, 0])
    assert rep.variances[0] == pytest.approx(f.var(ddof=1))


def test_lln_exponential_empty_fraction():
    Ns = [10, 40, 160]
    runs = {N: net.sample_stationary(N, N, EXP, 600, seed=N) for N in Ns}
    rep = chaos.lln_test(runs, TF.k_eq(0))
    for N, m in zip(Ns, rep.means):
        assert m == pytest.approx((N - 1) / (2 * N - 1), abs=0.02)
    assert -1.3 < rep.slope < -0.7
    assert rep.variances[0] > rep.variances[1] > rep.variances[2]


def test_exact_small_oracle_examples():
    assert chaos.exact_small_oracle(2, 2) == {(0, 2): Fraction(1, 3), (1, 1): Fraction(1, 3), (2, 0): Fraction(1, 3)}
    assert chaos.exact_small_oracle(2, 1) == {(0, 1): Fraction(1, 2), (1, 0): Fraction(1, 2)}
    law = chaos.exact_small_oracle(3, 2)
    assert len(law) == 6 and set(law.values()) == {Fraction(1, 6)}
    with pytest.raises(ValueError):
        chaos.exact_small_oracle(20, 20)


def test_exchangeability():
    snaps = net.sample_stationary(4, 6, LOMAX, 3000, seed=6)
    assert chaos.exchangeability_test(snaps, 0, 1, n_perm=300) > 0.01
    # a deliberately asymmetric sample is detected
    k = np.column_stack([np.zeros(400, dtype=int), np.full(400, 2)])
    skew = Snapshots(k, np.zeros(k.shape), np.arange(400.0))
    assert chaos.exchangeability_test(skew, 0, 1, n_perm=300) < 0.01


def test_monotone_in_population():
    lo = net.sample_stationary(5, 4, EXP, 4000, seed=1).k[:, 0]
    hi = net.sample_stationary(5, 9, EXP, 4000, seed=2).k[:, 0]
    assert empirical_dominance_test(lo, hi).passed
    assert not empirical_dominance_test(hi, lo).passed


def test_corollary_k_trivial_and_small_network():
    rep = chaos.corollary_k_compare(np.zeros(100, dtype=int), DistOnZ.point(0), tol=0.05, n_boot=50)
    assert rep.metrics["tv"] == 0.0 and rep.passed

    mu0 = nlmp.init_measure_q0([0.0, 1.0])
    _, rt = nlmp.evolve(mu0, EXP, 10.0)
    ref = nlmp.poisson_count_dist(rt, 10.0)

    def counts(N, reps):
        out = []
        for i in range(reps):
            st_ = net.init_state(N, N)
            out.append(net.tagged_arrival_count(st_, EXP, 0, 10.0, net.Streams(EXP, N, np.random.SeedSequence(3, spawn_key=(i,)))))
        return out

    small = chaos.corollary_k_compare(counts(2, 3000), ref, n_boot=100)
    big = chaos.corollary_k_compare(counts(100, 3000), ref, n_boot=100)
    assert small.metrics["tv"] > big.ci["tv"][1]
    assert small.metrics["tv"] > 0.1


def test_sph_empty_network():
    snaps = net.sample_stationary(6, 0, EXP, 10, seed=0)
    rep = chaos.sph_compare(snaps, nlmp.init_measure_q0([1.0]), tol=0.02, n_boot=20)
    assert rep.metrics["tv_k"] == 0.0 and rep.passed


def test_sph_exponential_geometric():
    snaps = net.sample_stationary(50, 50, EXP, 1000, seed=9)
    rep = chaos.sph_compare(snaps, geometric_pmf(0.5, 60), tol=0.03, n_boot=200)
    assert rep.passed
    rep = chaos.sph_compare(snaps, product_form_marginal(50, 50), tol=0.02, n_boot=200)
    assert rep.passed
    row = rep.rows(N=50)[0]
    assert row["statistic"] == "tv_k" and row["N"] == 50
    assert json.loads(rep.to_json())["passed"] is True


def test_wph_trend_and_initial_distance():
    a, times = 1.0, [0.0, 1.0, 5.0, 10.0]
    mu0 = nlmp.init_measure_q0([0.0, 1.0])
    _, rt = nlmp.evolve(mu0, EXP, 10.0, save_at=times)
    gaps = {}
    for N in (20, 100, 400):
        runs = [net.trajectory(net.init_state(N, N), EXP, times, net.Streams(EXP, N, np.random.SeedSequence(N, spawn_key=(r,))))
                for r in range(40)]
        rep = chaos.wph_compare(runs, rt.measures, times)
        assert rep.metrics["tv_k@0"] == pytest.approx(0.0, abs=1e-12)
        assert rep.metrics["w1_z@0"] < mu0.dz
        gaps[N] = [rep.metrics[f"tv_k@{t:g}"] for t in times[1:]]
    for t in range(3):
        assert gaps[20][t] > gaps[100][t] > gaps[400][t]
    with pytest.raises(KeyError):
        chaos.wph_compare(runs, rt.measures, [2.0, 3.0, 4.0, 6.0])


def test_rows_to_csv():
    text = chaos.rows_to_csv([{"a": 1, "b": 2}, {"a": 3, "c": 4}], header={"seed": 1})
    assert text.splitlines() == ['# {"seed": 1}', "a,b,c", "1,2,", "3,,4"]


pmfs = st.lists(st.floats(min_value=0, max_value=1), min_size=1, max_size=8).filter(lambda p: sum(p) > 0)


@settings(max_examples=100, deadline=None)
@given(p=pmfs, q=pmfs)
def test_distances_symmetric(p, q):
    p = np.array(p) / sum(p)
    q = np.array(q) / sum(q)
    assert chaos.tv_distance(p, q) == pytest.approx(chaos.tv_distance(q, p))
    assert 0.0 <= chaos.tv_distance(p, q) <= 1.0 + 1e-12
    assert chaos.tv_distance(p, p) == 0.0
    x, y = np.arange(len(p)), np.arange(len(q))
    assert chaos.w1_distance(x, y, p, q) == pytest.approx(chaos.w1_distance(y, x, q, p))
    assert chaos.w1_distance(x, x, p, p) == 0.0
