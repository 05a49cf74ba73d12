import json
import math
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dwre.circle_maps import ExpandingMap, Gate, SitePair
from dwre.environment import (BLOCK, EnvironmentSpec, RandomSource, SpecError, WindowError, builtin_spec,
                              constant_spec, counterexample_gate, counterexample_spec, deserialize, extend, iid_spec,
                              realize, relaxed_pair, serialize)

A, B = relaxed_pair(0.2), relaxed_pair(0.1)


def test_random_source_is_reproducible_and_split():
    a = RandomSource(7, (1, 2)).generator().random(5)
    assert np.array_equal(a, RandomSource(7, (1, 2)).generator().random(5))
    assert not np.array_equal(a, RandomSource(7, (1, 3)).generator().random(5))
    assert RandomSource(7).spawn(4) == RandomSource(7, (4,))


def test_iid_reproducible_and_seed_dependent():
    spec = iid_spec((A, B), (0.5, 0.5), (-1, 5000))
    t1 = realize(spec, 3).table()
    assert np.array_equal(t1, realize(spec, 3).table())
    assert not np.array_equal(t1, realize(spec, 4).table())


def test_iid_frequencies_chi_square():
    spec = iid_spec((A, B), (0.3, 0.7), (-1, 40_000))
    t = realize(spec, 11).table()
    counts = np.bincount(t, minlength=2)
    p = stats.chisquare(counts, f_exp=np.array([0.3, 0.7]) * len(t)).pvalue
    assert p > 1e-3


def test_iid_sites_independent_of_window_and_query_order():
    spec = iid_spec((A, B), (0.5, 0.5), (-1, 3 * BLOCK))
    env = realize(spec, 5)
    big = extend(env, 10 * BLOCK)
    assert np.array_equal(env.table(), big.table()[: len(env.table())])
    fresh = realize(spec, 5)
    backwards = [fresh.index(n) for n in range(3 * BLOCK, -2, -1)][::-1]
    assert np.array_equal(backwards, env.table())


@settings(max_examples=40, deadline=None)
@given(st.integers(-1, 9000), st.integers(0, 300))
def test_indices_slice_matches_pointwise(start, length):
    env = realize(iid_spec((A, B), (0.4, 0.6), (-1, 9500)), 2)
    stop = min(start + length, 9501)
    sl = env.indices(start, stop)
    assert list(sl) == [env.index(n) for n in range(start, stop)]


def test_counterexample_block_structure():
    env = realize(counterexample_spec(A, B, (-1, 2000)))
    t = env.table()
    for n in range(0, 2001):
        k = math.isqrt(n)
        assert t[n + 1] == k % 2
        assert counterexample_gate(n) == k % 2
    # boundary of each square block flips the type
    for k in range(1, 44):
        assert env.index(k * k) != env.index(k * k - 1)


def test_sites_below_window_reuse_first_site_and_above_raise():
    env = realize(iid_spec((A, B), (0.5, 0.5), (-1, 100)), 1)
    assert env.index(-50) == env.index(-1)
    with pytest.raises(WindowError):
        env.index(101)


def test_periodic_and_explicit():
    per = realize(EnvironmentSpec("periodic", (A, B), (-1, 20), pattern=(0, 1, 1)))
    assert [per.index(n) for n in range(6)] == [0, 1, 1, 0, 1, 1]
    exp = realize(EnvironmentSpec("explicit", (A, B), (-1, 2), pattern=(1, 0, 0, 1)))
    assert list(exp.table()) == [1, 0, 0, 1]


@pytest.mark.parametrize("kwargs, field", [
    (dict(kind="iid", alphabet=(A, B), window=(-1, 10), weights=(0.6, 0.6)), "weights"),
    (dict(kind="iid", alphabet=(A, B), window=(-1, 10), weights=(1.0, 0.0)), "weights"),
    (dict(kind="iid", alphabet=(A, B), window=(-1, 10)), "weights"),
    (dict(kind="periodic", alphabet=(A,), window=(-1, 10), pattern=(0, 2)), "pattern[1]"),
    (dict(kind="explicit", alphabet=(A,), window=(-1, 10), pattern=(0,)), "pattern"),
    (dict(kind="counterexample", alphabet=(A,), window=(-1, 10)), "alphabet"),
    (dict(kind="constant", alphabet=(A,), window=(1, 10)), "window"),
    (dict(kind="bogus", alphabet=(A,), window=(-1, 10)), "kind"),
])
def test_spec_errors_name_the_field(kwargs, field):
    with pytest.raises(SpecError, match="^" + re.escape(field)):
        EnvironmentSpec(**kwargs)


def test_serialize_round_trip(tmp_path):
    env = realize(iid_spec((A, B), (0.25, 0.75), (-1, 500)), 9)
    path = tmp_path / "env.json"
    serialize(env, path)
    back = deserialize(path)
    assert back.spec == env.spec and back.seed == 9
    assert np.array_equal(back.table(), env.table())


def test_deserialize_rejects_tampered_sites(tmp_path):
    env = realize(iid_spec((A, B), (0.5, 0.5), (-1, 50)), 9)
    d = env.to_dict()
    d["sites"][3] = 1 - d["sites"][3]
    path = tmp_path / "env.json"
    path.write_text(json.dumps(d))
    with pytest.raises(SpecError, match="sites"):
        deserialize(path)


def test_deserialize_reports_json_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n "kind": "constant",\n "alphabet": [\n}')
    with pytest.raises(SpecError, match="line 4"):
        deserialize(path)


def test_schema_version_checked():
    d = constant_spec(A).to_dict()
    d["schema_version"] = 99
    with pytest.raises(SpecError, match="schema_version"):
        EnvironmentSpec.from_dict(d)


def test_builtins():
    for name in ("srw", "paper-example", "relaxed", "nested-iid", "counterexample"):
        spec = builtin_spec(name, (-1, 100))
        assert realize(spec).table().shape == (102,)
    with pytest.raises(SpecError, match="env"):
        builtin_spec("nope")


def test_paper_example_pairs_valid():
    spec = builtin_spec("paper-example")
    bg, gs, _ = spec.validate_pairs()
    assert bg.ok and gs.ok
    assert spec.alphabet[0].map == ExpandingMap(4, 0.3, 0.0)
