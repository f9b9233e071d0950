import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpca.linalg import random_basis
from dpca.theory import (RegimeError, RegimeLabel, UndefinedMetricError, alignment_limit, average_retention,
                         classify_regime, eigenvalue_limit, kendall_population_eigenvalue, oneround_mse_limit,
                         phase_thresholds, pooled_mse_limit, variance_ratio_empirical, variance_ratio_limit)


def test_pooled_mse_limit_examples():
    assert pooled_mse_limit(200, 100, 1, [2.0]) == pytest.approx(3.0)
    assert pooled_mse_limit(200, 100, 10, [2.0]) == pytest.approx(0.3)
    assert pooled_mse_limit(200, 100, 1, [1e12]) < 1e-8


def test_oneround_mse_limit_examples():
    assert oneround_mse_limit(200, 100, 1, [2.0]) == pytest.approx(6.0)
    assert oneround_mse_limit(200, 100, 1, [2.0]) / pooled_mse_limit(200, 100, 1, [2.0]) == pytest.approx(2.0)
    # n just above p / l^2 = 50
    assert oneround_mse_limit(200, 50 + 1e-5, 1, [2.0]) > 1e6
    with pytest.raises(RegimeError):
        oneround_mse_limit(200, 50, 1, [2.0])
    with pytest.raises(RegimeError):
        oneround_mse_limit(200, 100, 1, [3.0, 1.0])


def test_variance_ratio_limit_examples():
    assert variance_ratio_limit(200, 100, [2.0]) == pytest.approx(2.0)
    assert variance_ratio_limit(200, 10**9, [2.0]) == pytest.approx(1.0, abs=1e-6)
    l = math.sqrt(200 / 100) * (1 + 1e-6)
    assert variance_ratio_limit(200, 100, [l]) > 100
    with pytest.raises(RegimeError):
        variance_ratio_limit(200, 100, [1.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 1000), st.integers(1, 1000), st.integers(1, 100),
       st.lists(st.floats(0.1, 50), min_size=1, max_size=4))
def test_ratio_consistency(p, n, K, spikes):
    l = np.asarray(spikes)
    if np.any(n - p / l**2 <= 1e-6 * n):
        with pytest.raises(RegimeError):
            variance_ratio_limit(p, n, spikes)
        return
    ratio = oneround_mse_limit(p, n, K, spikes) / pooled_mse_limit(p, n, K, spikes)
    assert ratio == pytest.approx(variance_ratio_limit(p, n, spikes), rel=1e-12)
    assert variance_ratio_limit(p, n, spikes) > 1


def test_phase_thresholds():
    local, pooled = phase_thresholds(1.0, 10)
    assert local == 1.0 and pooled == pytest.approx(0.31622776601683794)
    assert phase_thresholds(2.0, 1)[0] == phase_thresholds(2.0, 1)[1]
    assert phase_thresholds(0.0, 5) == (0.0, 0.0)


def test_regimes_strict_boundaries():
    assert classify_regime(0.2, 1.0, 10) is RegimeLabel.BELOW_POOL_THRESHOLD
    assert classify_regime(math.sqrt(0.1), 1.0, 10) is RegimeLabel.BELOW_POOL_THRESHOLD
    assert classify_regime(0.5, 1.0, 10) is RegimeLabel.PHASE_GAP
    assert classify_regime(1.0, 1.0, 10) is RegimeLabel.PHASE_GAP
    assert classify_regime(1.5, 1.0, 10) is RegimeLabel.ABOVE_LOCAL_THRESHOLD
    assert classify_regime(10.0, 1.0, 10) is RegimeLabel.STRONG_LOCAL
    assert classify_regime(5.0, 1.0, 10, strong_multiplier=5) is RegimeLabel.STRONG_LOCAL


def test_eigenvalue_limit():
    assert eigenvalue_limit(2.0, 1.0) == pytest.approx(4.5)
    assert eigenvalue_limit(1.0, 1.0) == pytest.approx(4.0)
    assert eigenvalue_limit(3.0, 0.0) == pytest.approx(4.0)
    assert abs(eigenvalue_limit(1.0 + 1e-9, 1.0) - eigenvalue_limit(1.0, 1.0)) < 1e-6


def test_alignment_limit():
    assert alignment_limit(2.0, 1.0) == pytest.approx(0.5)
    assert alignment_limit(1.0, 1.0) == 0.0
    assert alignment_limit(0.5, 1.0) == 0.0
    assert alignment_limit(1e9, 1.0) == pytest.approx(1.0, abs=1e-8)
    assert abs(alignment_limit(1.0 + 1e-9, 1.0) - alignment_limit(1.0, 1.0)) < 1e-6


def test_average_retention():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((10, 4))
    assert average_retention(np.eye(4), X) == pytest.approx(1.0)
    U = np.eye(4)[:, :2]
    assert average_retention(U, np.c_[X[:, :2], np.zeros((10, 2))]) == pytest.approx(1.0)
    assert average_retention(U, np.c_[np.zeros((10, 2)), X[:, 2:]]) == 0.0
    assert average_retention(np.array([[1.0], [0.0]]), [[2**-0.5, 2**-0.5]]) == pytest.approx(0.5)
    with pytest.raises(UndefinedMetricError):
        average_retention(U, np.zeros((3, 4)))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**32 - 1))
def test_retention_bounds_and_rotation(p, seed):
    rng = np.random.default_rng(seed)
    r = int(rng.integers(1, p + 1))
    U = random_basis(p, r, rng)
    X = rng.standard_normal((5, p))
    ar = average_retention(U, X)
    assert 0.0 <= ar <= 1.0
    G = np.linalg.qr(rng.standard_normal((r, r)))[0]
    assert average_retention(U @ G, X) == pytest.approx(ar, abs=1e-12)


def test_variance_ratio_empirical():
    assert variance_ratio_empirical([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 1.0
    assert variance_ratio_empirical([2.0, 4.0, 6.0], [1.0, 2.0, 3.0]) == pytest.approx(2.0)


def test_kendall_population_eigenvalue_equal_scatter():
    lam = np.ones(5)
    for j in range(5):
        value, se = kendall_population_eigenvalue(lam, j, 40_000, seed=j)
        assert abs(value - 0.2) <= 3 * se


def test_kendall_population_eigenvalues_sum_to_one():
    lam = np.array([5.0, 3.0, 2.0, 1.0, 1.0])
    est = [kendall_population_eigenvalue(lam, j, 40_000, seed=7) for j in range(lam.size)]
    # same seed: the ratios sum to one draw by draw
    assert sum(v for v, _ in est) == pytest.approx(1.0, abs=1e-12)
    est = [kendall_population_eigenvalue(lam, j, 40_000, seed=10 + j) for j in range(lam.size)]
    assert abs(sum(v for v, _ in est) - 1.0) <= 3 * math.sqrt(sum(se**2 for _, se in est))


def test_kendall_population_eigenvalue_seed_consistency():
    lam = [5.0, 1.0, 1.0, 1.0]
    a, sa = kendall_population_eigenvalue(lam, 0, 100_000, seed=1)
    b, sb = kendall_population_eigenvalue(lam, 0, 100_000, seed=2)
    assert abs(a - b) <= 3 * math.hypot(sa, sb)
    assert a > 0.25  # larger scatter eigenvalue gets a larger share
