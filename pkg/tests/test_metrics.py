import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradleak.errors import ShapeError
from gradleak.metrics import greedy_assignment, match_batch, mse, psnr, psnr_for_csv, ssim


def _ssim_reference(a, b, win=8):
    """Loop-based SSIM with population statistics, one window at a time."""
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    a = a if a.ndim == 3 else a[None]
    b = b if b.ndim == 3 else b[None]
    chans = []
    for ch in range(a.shape[0]):
        vals = []
        for i in range(a.shape[1] - win + 1):
            for j in range(a.shape[2] - win + 1):
                pa = a[ch, i:i + win, j:j + win].ravel()
                pb = b[ch, i:i + win, j:j + win].ravel()
                ma, mb = sum(pa) / pa.size, sum(pb) / pb.size
                va = sum((pa - ma) ** 2) / pa.size
                vb = sum((pb - mb) ** 2) / pb.size
                cov = sum((pa - ma) * (pb - mb)) / pa.size
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
        chans.append(sum(vals) / len(vals))
    return sum(chans) / len(chans)


def test_mse_examples():
    x = np.random.default_rng(0).uniform(size=(3, 5))
    assert mse(x, x) == 0.0
    assert mse([0, 1], [1, 1]) == 0.5
    y = np.random.default_rng(1).uniform(size=(3, 5))
    assert mse(x, y) == pytest.approx(sum((p - q) ** 2 for p, q in zip(x.ravel(), y.ravel())) / 15, rel=1e-14)
    with pytest.raises(ShapeError):
        mse([1, 2], [1, 2, 3])


def test_psnr_examples():
    assert psnr(0.01) == pytest.approx(20.0, abs=1e-12)
    assert psnr(1.0) == 0.0
    assert psnr(0.0) == math.inf and psnr_for_csv(psnr(0.0)) == 99.0
    assert psnr(0.25, max_value=2.0) == pytest.approx(10 * math.log10(16), rel=1e-15)
    with pytest.raises(ValueError):
        psnr(-1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-12, 10.0), st.floats(1e-12, 10.0))
def test_psnr_strictly_decreasing(a, b):
    if a < b:
        assert psnr(a) > psnr(b)


def test_ssim_identity_and_constants():
    x = np.random.default_rng(2).uniform(size=(12, 12))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-14)
    c1, c2, C1 = 0.2, 0.7, 1e-4
    expected = (2 * c1 * c2 + C1) / (c1 ** 2 + c2 ** 2 + C1)
    assert ssim(np.full((9, 9), c1), np.full((9, 9), c2)) == pytest.approx(expected, abs=1e-12)


def test_ssim_matches_loop_reference():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
    assert abs(ssim(a, b) - _ssim_reference(a, b)) < 1e-10
    a3, b3 = rng.uniform(size=(3, 10, 9)), rng.uniform(size=(3, 10, 9))
    assert abs(ssim(a3, b3) - _ssim_reference(a3, b3)) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_ssim_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(10, 10)), rng.uniform(size=(10, 10))
    s = ssim(a, b)
    assert abs(s - ssim(b, a)) <= 1e-12
    assert -1.0 <= s <= 1.0


def test_ssim_errors():
    with pytest.raises(ShapeError):
        ssim(np.zeros((7, 7)), np.zeros((7, 7)))
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8)), np.zeros((9, 9)))


def test_match_batch_permuted_recon():
    truth = np.random.default_rng(4).uniform(size=(4, 1, 8, 8))
    perm = [2, 0, 3, 1]
    rep = match_batch(truth[perm], truth)
    assert rep.mse == [0.0] * 4
    assert rep.mean_psnr == 99.0
    for t in range(4):
        assert perm[rep.permutation[t]] == t
    one = match_batch(truth[:1] * 0.5, truth[:1])
    assert one.permutation == [0]


def test_match_batch_invariant_to_recon_order():
    rng = np.random.default_rng(5)
    truth = rng.uniform(size=(4, 8, 8))
    recon = truth + rng.normal(scale=0.1, size=truth.shape)
    a = match_batch(recon, truth)
    b = match_batch(recon[[3, 1, 0, 2]], truth)
    assert a.mse == b.mse and a.psnr == b.psnr and a.ssim == b.ssim


def _brute(cost):
    b = cost.shape[0]
    return min(itertools.permutations(range(b)), key=lambda p: sum(cost[p[t], t] for t in range(b)))


def test_greedy_equals_brute_force_on_constructed_case():
    cost = np.array([[0.1, 5.0, 6.0], [4.0, 0.2, 7.0], [3.0, 8.0, 0.3]])
    assert tuple(greedy_assignment(cost)) == _brute(cost) == (0, 1, 2)


def test_greedy_near_optimal_on_random_instances():
    rng = np.random.default_rng(6)
    optimal, worst_gap = 0, 0.0
    trials = 400
    for _ in range(trials):
        b = int(rng.integers(1, 5))
        truth = rng.uniform(size=(b, 8, 8))
        recon = truth[rng.permutation(b)] + rng.normal(scale=0.3, size=truth.shape)
        cost = ((recon[:, None] - truth[None]) ** 2).mean(axis=(2, 3))
        g = greedy_assignment(cost)
        best = _brute(cost)
        g_cost = sum(cost[g[t], t] for t in range(b))
        b_cost = sum(cost[best[t], t] for t in range(b))
        if g_cost <= b_cost + 1e-15:
            optimal += 1
        else:
            worst_gap = max(worst_gap, g_cost / b_cost - 1)
    assert optimal >= 0.95 * trials
    assert worst_gap < 0.05
