import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwre.circle_maps import (Arc, ArcWrapError, ConditionError, ExpandingMap, Gate, MapConstants, Perturbation,
                              SitePair, Verdict, admissible_centers, arc_gap, build_paper_example, check_bgeom,
                              disjoint_verdict, image_interval, verify_gt1, verify_gt2, verify_model_b, wrap,
                              wrap_depth)
from dwre.environment import constant_spec, paper_example_constants, realize, relaxed_pair

maps = st.builds(
    ExpandingMap,
    degree=st.integers(2, 6),
    amplitude=st.floats(-0.9, 0.9),
    phase=st.floats(0, 1),
    perturbation=st.lists(st.builds(Perturbation, st.floats(-0.3, 0.3), st.integers(1, 4), st.floats(0, 1)),
                          max_size=2),
)


def test_doubling_values():
    T = ExpandingMap(2)
    assert T(0.3) == pytest.approx(0.6)
    assert T(0.75) == 0.5
    assert T(0.0) == 0.0


def test_frozen_value_of_sine_family():
    # 0.4 + 0.3/(2 pi) * sin(0.2 pi)
    assert ExpandingMap(4, 0.3)(0.1) == pytest.approx(0.42806468, abs=1e-8)


def test_wrap_guards_rounding_to_one():
    assert wrap(-1e-20) == 0.0
    assert 0.0 <= float(wrap(-1e-17)) < 1.0


def test_non_increasing_map_rejected():
    with pytest.raises(ConditionError):
        ExpandingMap(1, 1.5)


def test_strict_and_relaxed_constants():
    T = ExpandingMap(4, 0.3)
    c = T.constants()
    assert (c.gamma, c.K) == pytest.approx((3.7, 4.3))
    assert c.K1 == pytest.approx(2 * math.pi * 0.3)
    with pytest.raises(ConditionError):
        ExpandingMap(2, 0.9).constants(strict=True)
    assert ExpandingMap(2, 0.9).constants(strict=False).gamma == pytest.approx(1.1)


@settings(max_examples=60, deadline=None)
@given(maps, st.floats(0, 1, exclude_max=True))
def test_derivative_between_gamma_and_K(T, x):
    lo = T.expansion_lower_bound
    hi = 2 * T.degree - lo
    d = float(T.derivative(x))
    assert lo - 1e-12 <= d <= hi + 1e-12


@settings(max_examples=60, deadline=None)
@given(maps, st.floats(-3, 3))
def test_lift_degree_identity(T, x):
    # covering degree: the lift advances by exactly `degree` per turn
    assert float(T.lift(x + 1.0)) - float(T.lift(x)) == pytest.approx(T.degree, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(maps, st.floats(0, 1, exclude_max=True), st.floats(1e-6, 0.05))
def test_arc_expansion(T, start, length):
    img = image_interval(T, Arc(start, length))
    gamma = T.expansion_lower_bound
    K = 2 * T.degree - gamma
    assert gamma * length * (1 - 1e-9) <= img.length <= K * length * (1 + 1e-9)


def test_image_wrap_raises():
    with pytest.raises(ArcWrapError):
        image_interval(ExpandingMap(4), Arc(0.0, 0.3))


def test_gate_half_open():
    g = Gate(0.5, 0.25)  # dyadic endpoints, so the boundary test is exact
    assert g.contains(0.375)
    assert not g.contains(0.625)
    assert g.contains(np.nextafter(0.625, 0))
    w = Gate(0.0, 0.25)  # wraps through 0
    assert w.contains(0.9) and w.contains(0.1) and not w.contains(0.125)


def test_empty_gate_contains_nothing():
    assert not np.any(Gate(0.3, 0.0).contains(np.linspace(0, 1, 101)))


def test_arc_gap_and_verdicts():
    a, b = Arc(0.1, 0.1), Arc(0.3, 0.1)
    assert arc_gap(a, b) == pytest.approx(0.1)
    assert disjoint_verdict(a, b)[0] is Verdict.PASS
    assert disjoint_verdict(a, Arc(0.15, 0.1))[0] is Verdict.FAIL
    assert disjoint_verdict(a, Arc(0.2, 0.1))[0] is Verdict.INCONCLUSIVE  # touching within the margin


def test_verdict_algebra():
    P, F, I = Verdict.PASS, Verdict.FAIL, Verdict.INCONCLUSIVE
    assert P & P is P and P & I is I and I & F is F and F & P is F


def test_gt1_wide_gate():
    p = relaxed_pair(0.2)
    assert verify_gt1(p, p)[0] is Verdict.PASS
    bad = SitePair(ExpandingMap(2, 0.9, 0.25), Gate(0.5, 0.2))
    assert verify_gt1(bad, bad)[0] is Verdict.FAIL


@settings(max_examples=30, deadline=None)
@given(st.floats(0.02, 0.3), st.floats(0.1, 0.9))
def test_gt_clearance_monotone_in_width(width, shrink):
    # shrinking a gate about its centre can only increase the clearance
    maps_ = [ExpandingMap(4, 0.3)]
    c = np.array([0.1, 0.37, 0.59215, 0.8])
    g1 = admissible_centers(maps_, width, 2, c)
    g2 = admissible_centers(maps_, width * shrink, 2, c)
    assert np.all(g2 >= g1 - 1e-12)


def test_paper_example_gate_passes_gt2():
    consts = paper_example_constants()
    pairs = build_paper_example(consts, 5, amplitudes=[0.3])
    g = pairs[0].gate
    assert consts.c * consts.delta0 <= g.width <= consts.delta0
    env = realize(constant_spec(pairs[0], (-1, 50), consts))
    rep = verify_gt2(env, 5)
    assert rep.verdict is Verdict.PASS and rep.min_gap > 0


def test_gt2_wrap_is_inconclusive():
    env = realize(constant_spec(relaxed_pair(0.2), (-1, 30)))
    rep = verify_gt2(env, 8)
    assert rep.gt2_ok is Verdict.INCONCLUSIVE
    assert rep.witnesses[0]["condition"] == "gt2"


def test_check_bgeom_flags_wide_gate_and_weak_expansion():
    consts = paper_example_constants()
    bg, gs, _ = check_bgeom([SitePair(ExpandingMap(4, 0.3), Gate(0.5, 0.1))], consts)
    assert bg is Verdict.PASS and gs is Verdict.FAIL
    bg, _, _ = check_bgeom([relaxed_pair()], None, strict=True)
    assert bg is Verdict.FAIL


def test_model_b_closeness():
    ref = SitePair(ExpandingMap(4, 0.3), Gate(0.59, 1e-4))
    ok, dev, _ = verify_model_b([ref], ref, 1e-3)
    assert ok and dev == 0.0
    near = SitePair(ExpandingMap(4, 0.3, 0.0, (Perturbation(1e-4),)), Gate(0.59001, 1e-4))
    ok, dev, _ = verify_model_b([near], ref, 1e-3)
    assert ok and 0 < dev <= 1e-3
    ok, _, worst = verify_model_b([near], ref, 1e-6)
    assert not ok and worst["site"] == 0


def test_constants_validation():
    with pytest.raises(ConditionError):
        MapConstants(gamma=5, K=4, K1=1)
    with pytest.raises(ConditionError):
        MapConstants(gamma=3.5, K=4, K1=1, c=0)


def test_wrap_depth():
    assert wrap_depth(2.0, 1 / 8) == 3
    assert wrap_depth(3.7, 1.0) == 0
    assert wrap_depth(2.0, 0.0) == math.inf


def test_pair_round_trip():
    p = SitePair(ExpandingMap(4, 0.3, 0.1, (Perturbation(0.05, 2, 0.3),)), Gate(0.59, 1e-4))
    assert SitePair.from_dict(p.to_dict()) == p
