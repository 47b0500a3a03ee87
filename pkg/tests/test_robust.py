import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gradleak.errors import AggregationError
from gradleak.robust import MEAN, MEDIAN, AggregatorKind, aggregate, deviation_bound

TRIM = AggregatorKind("trimmed_mean", beta=0.2)


def test_median_examples():
    assert aggregate(MEDIAN, [[1.0], [2.0], [100.0]]).tolist() == [2.0]
    assert aggregate(MEDIAN, [[1.0], [2.0], [3.0], [10.0]]).tolist() == [2.5]


def test_trimmed_mean_example():
    assert aggregate(TRIM, [[1.0], [2.0], [3.0], [4.0], [100.0]]).tolist() == [3.0]


def _brute_krum(vs, f):
    vs = np.asarray(vs, dtype=float)
    t = len(vs)
    best, best_i = math.inf, None
    for i in range(t):
        d = sorted(float(np.sum((vs[i] - vs[j]) ** 2)) for j in range(t) if j != i)
        score = sum(d[:t - f - 2])
        if score < best:  # strict: first index wins ties
            best, best_i = score, i
    return best_i


def test_krum_example_with_tie():
    vs = [[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [10.0, 10.0]]
    assert _brute_krum(vs, 1) == 0
    assert aggregate(AggregatorKind("krum", f=1), vs).tolist() == [0.0, 0.0]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(4, 9), st.integers(0, 1))
def test_krum_matches_brute_force(seed, t, f):
    vs = np.random.default_rng(seed).normal(size=(t, 3))
    assert aggregate(AggregatorKind("krum", f=f), list(vs)).tolist() == vs[_brute_krum(vs, f)].tolist()


def test_mean_of_one_and_identical():
    v = np.array([0.1, 0.7, -3.3])
    assert aggregate(MEAN, [v]).tobytes() == v.tobytes()
    for kind in (MEAN, MEDIAN, TRIM, AggregatorKind("krum")):
        assert aggregate(kind, [v] * 7).tobytes() == v.tobytes()


def test_shape_preserved_and_weights():
    vs = [np.ones((2, 3)), 3 * np.ones((2, 3))]
    assert aggregate(MEDIAN, vs).shape == (2, 3)
    np.testing.assert_allclose(aggregate(MEAN, vs, weights=[0.25, 0.75]), 2.5 * np.ones((2, 3)))


def test_constraint_errors():
    with pytest.raises(AggregationError):
        aggregate(MEAN, [])
    with pytest.raises(AggregationError):
        aggregate(MEAN, [[1.0], [1.0, 2.0]])
    with pytest.raises(AggregationError):
        aggregate(AggregatorKind("krum", f=1), [[1.0], [2.0], [3.0]])
    with pytest.raises(AggregationError):
        AggregatorKind("trimmed_mean", beta=0.5)
    with pytest.raises(AggregationError):
        AggregatorKind("mode")
    with pytest.raises(AggregationError):
        AggregatorKind.parse("median:3")


def test_parse_and_str():
    for text in ("mean", "median", "trimmed_mean:0.3", "krum:2"):
        assert str(AggregatorKind.parse(text)) == text
    assert AggregatorKind.parse("Trimmed-Mean") == AggregatorKind("trimmed_mean")


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 5)), elements=st.floats(-1e6, 1e6)),
       st.randoms(use_true_random=False))
def test_permutation_invariance(stacked, rnd):
    vs = list(stacked)
    perm = list(range(len(vs)))
    rnd.shuffle(perm)
    shuffled = [vs[i] for i in perm]
    for kind in (MEAN, MEDIAN, AggregatorKind("trimmed_mean", beta=0.1)):
        assert aggregate(kind, vs).tobytes() == aggregate(kind, shuffled).tobytes()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(5, 12), st.floats(100.0, 1e8))
def test_robust_output_stays_in_good_range(seed, t, scale):
    rng = np.random.default_rng(seed)
    m = (t - 1) // 2 if t % 2 else t // 2 - 1
    m = min(m, (t - 1) // 3)  # krum needs f >= m with T >= f + 3
    good = rng.normal(size=(t - m, 4))
    # mutually distant outliers, each far from the good cloud
    bad = rng.normal(size=(m, 4)) + scale * np.arange(1, m + 1)[:, None]
    vs = list(good) + list(bad)
    lo, hi = good.min(axis=0), good.max(axis=0)
    for kind in (MEDIAN, AggregatorKind("trimmed_mean", beta=math.ceil(m) / t + 1e-12 if m else 0.0)):
        out = aggregate(kind, vs)
        assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)
    if m:
        chosen = aggregate(AggregatorKind("krum", f=m), vs)
        assert any(np.array_equal(chosen, g) for g in good)


def test_mean_is_not_robust():
    vs = [np.zeros(3)] * 9 + [np.full(3, 1e9)]
    assert np.all(aggregate(MEAN, vs) >= 1e8)
    assert np.all(aggregate(MEDIAN, vs) == 0)


def test_deviation_bound_examples():
    assert deviation_bound([[1.0, 2.0]] * 4, 4) == (0.0, 0.0)
    kappa, bound = deviation_bound([[0.0], [2.0]], 2)
    assert kappa == 1.0 and bound == pytest.approx(math.sqrt(2))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 4), st.floats(1.0, 1e6))
def test_claim_one_numeric(seed, m, scale):
    t, n = 10, 50
    rng = np.random.default_rng(seed)
    good = rng.normal(size=(t - m, n))
    bad = rng.normal(size=(m, n)) * scale
    kappa, bound = deviation_bound(good, t)
    dev = np.linalg.norm(aggregate(MEDIAN, list(good) + list(bad)) - good.mean(axis=0))
    assert dev <= bound + 1e-9
