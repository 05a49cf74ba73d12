import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwre.circle_maps import ExpandingMap, Gate, SitePair
from dwre.environment import RandomSource, builtin_spec, constant_spec, iid_spec, realize, relaxed_pair
from dwre.statistics import (DegenerateError, PreconditionError, calibrated_threshold, counterexample_check,
                             drift_estimates, drift_series, hitting_clt, ks_normal, model_a_constants, scale_clt,
                             scale_function, srw_ks, studentize, truncation_curve, variance_growth)
from dwre.walk import hitting_times, initial_points

RELAXED = realize(builtin_spec("relaxed", (-1, 5000)))
NESTED = realize(builtin_spec("nested-iid", (-1, 5000)), 1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=200).filter(lambda v: np.ptp(v) > 1e-3))
def test_studentize_exact(vals):
    s = studentize(vals)
    assert abs(s.mean()) < 1e-12
    assert abs(s.var() - 1) < 1e-12


def test_studentize_rejects_constant():
    with pytest.raises(DegenerateError):
        studentize([2.0, 2.0, 2.0])


def test_ks_of_large_normal_sample():
    x = RandomSource(0).generator().normal(size=1_000_000)
    assert ks_normal(x) < 0.002


def test_ks_detects_non_normal_and_needs_samples():
    u = RandomSource(1).generator().random(10_000)
    assert ks_normal(u) > 0.04
    with pytest.raises(ValueError):
        ks_normal(np.arange(50.0))


def test_srw_calibration_deterministic_and_lattice_sized():
    a = srw_ks(2000, 100_000, 0)
    assert a == srw_ks(2000, 100_000, 0)
    # the SRW lattice step 2/sqrt(n) puts a floor under KS
    assert 0.005 < a < 0.02
    assert calibrated_threshold(2000, 100_000) == pytest.approx(1.5 * np.mean([srw_ks(2000, 100_000, s)
                                                                               for s in range(5)]))


def test_model_a_constants_examples():
    N, d = model_a_constants(0.1, 0.5, 1.0, 1.0, 1.0)
    assert N == 6  # 0.5^6 = 0.0156 < 0.025 <= 0.5^5
    assert d == pytest.approx(0.1 / 15)
    assert model_a_constants(0.1, 0.0, 1.0, 1.0, 1.0)[0] == 1
    with pytest.raises(ValueError):
        model_a_constants(0.1, 1.0, 1.0, 1.0, 1.0)


def test_drift_series_bounds_and_empty_gate():
    a = drift_series(NESTED, 300, 512)
    assert np.all(a >= 1) and np.all(a <= 3)
    assert a[0] == pytest.approx(1 + 2 * (0.2 if NESTED.index(0) == 0 else 0.1))
    empty = realize(constant_spec(SitePair(ExpandingMap(2, 0.9, 0.25), Gate(0.25, 0.0)), (-1, 400)))
    est = drift_estimates(empty, 200, 256, burn=20)
    assert np.all(est.a_series == 1.0) and est.a == 1.0 and est.D2 == 0.0


def test_drift_matches_monte_carlo_mean():
    a = drift_series(RELAXED, 400, 1024)
    tau = hitting_times(initial_points(20000, "uniform", 2), [400], RELAXED)[0]
    se = tau.std() / math.sqrt(len(tau))
    assert abs(a.sum() - tau.mean()) < 5 * se + 0.5


def test_truncation_curve_decays():
    env = realize(builtin_spec("nested-iid", (-1, 500)), 3)
    depths = [1, 4, 8, 16, 32]
    errs = np.array(truncation_curve(env, 300, depths, 512))
    assert np.all(np.diff(errs) < 0)
    rate = math.exp(np.polyfit(depths, np.log(errs), 1)[0])
    assert rate < 0.7


def test_scale_table_galois_and_bounds():
    tab = scale_function(NESTED, 400, 4000, seed=3)
    z = np.arange(tab.z_max + 1)
    assert np.all(tab.S >= z) and np.all(tab.S <= 3 * z)
    assert np.all(tab.inverse(tab.S) >= z)
    s = np.linspace(0, tab.S[-1], 997)
    assert np.all(tab(tab.inverse(s)) <= s)
    assert tab(-3) == -3
    with pytest.raises(ValueError):
        tab(tab.z_max + 1)


def test_scale_table_thread_independent():
    a = scale_function(realize(builtin_spec("nested-iid", (-1, 300)), 1), 200, 20000, 4, threads=1)
    b = scale_function(realize(builtin_spec("nested-iid", (-1, 300)), 1), 200, 20000, 4, threads=3)
    assert np.array_equal(a.S, b.S) and np.array_equal(a.var_tau, b.var_tau)


def test_hitting_clt_small():
    rep = hitting_clt(RELAXED, 400, 20000, seed=1)
    assert rep.passed
    assert rep.extra["per_step_mean"] == pytest.approx(1.588, abs=0.01)


def test_scale_clt_duality_and_lags():
    rep = scale_clt(NESTED, 600, 20000, seed=2, threshold=0.05)
    assert rep.extra["duality_ok"]
    assert rep.extra["lag10_violations"] == 0 and rep.extra["lag3_violations"] == 0


def test_variance_growth_linear():
    vg = variance_growth(RELAXED, [100, 200, 400, 800], 5000, seed=1, tail_from=200, bootstrap=50)
    assert vg.passed
    assert vg.slope == pytest.approx(0.84, rel=0.2)
    assert vg.bound_tau["within_1_2"]


def test_quenched_variance_consistent_with_hitting_slope():
    # on a constant environment the drift pipeline and the growth of var(tau_n) agree
    est = drift_estimates(RELAXED, 4000, 1024, N_s=20000, seed=5)
    vg = variance_growth(RELAXED, [2000, 4000], 20000, seed=6, tail_from=2000, bootstrap=20, drift_grid=None)
    assert est.sigma2_tau == pytest.approx(vg.variance[-1] / 4000, rel=0.1)
    assert est.D2 < 1e-12


def test_counterexample_refuses_equal_drifts():
    p = relaxed_pair(0.2)
    with pytest.raises(PreconditionError):
        counterexample_check(p, p, [10], 1000, drift_sites=200)
