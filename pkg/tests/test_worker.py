import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpca.linalg import DimensionError, InputError, projector_distance, random_basis
from dpca.models import DatasetShard, SpikedModelSpec, make_population, sample_gaussian_spiked
from dpca.worker import (DegenerateDataError, LocalSummary, Subsample, _pair_index, compute_local_covariance,
                         compute_local_kendall_tau, kendall_tau_matrix, local_top_r, noise_level, shifted_step,
                         summarize, unshifted_step)


def cov(M):
    return LocalSummary("covariance", np.asarray(M, dtype=float), 1)


def test_covariance_examples():
    np.testing.assert_array_equal(compute_local_covariance(np.array([[1.0, 0.0]])).matrix, [[1, 0], [0, 0]])
    np.testing.assert_array_equal(compute_local_covariance(np.array([[1.0, 0.0], [-1.0, 0.0]])).matrix,
                                  [[1, 0], [0, 0]])
    with pytest.raises(InputError):
        compute_local_covariance(np.zeros((0, 3)))


def test_covariance_large_sample():
    spec = SpikedModelSpec(p=3, spikes=(2.0,))
    shard = sample_gaussian_spiked(spec, 100_000, 1, 5)[0]
    before = shard.data.copy()
    S = compute_local_covariance(shard).matrix
    assert np.max(np.abs(S - make_population(spec).sigma)) <= 0.05
    np.testing.assert_array_equal(shard.data, before)


def test_pair_index_matches_triu():
    for n in (2, 3, 7, 50):
        i, j = _pair_index(np.arange(n * (n - 1) // 2), n)
        ti, tj = np.triu_indices(n, 1)
        np.testing.assert_array_equal(i, ti)
        np.testing.assert_array_equal(j, tj)


def test_kendall_single_pair():
    d = np.array([3.0, 4.0])
    S = compute_local_kendall_tau(np.vstack([d, np.zeros(2)])).matrix
    np.testing.assert_allclose(S, np.outer(d, d) / 25.0, atol=1e-15)
    assert np.trace(S) == pytest.approx(1.0, abs=1e-15)


def test_kendall_skips_duplicate_points():
    X = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    S, used = kendall_tau_matrix(X)
    assert used == 2
    # both remaining pairs have difference (1, -1) up to sign
    np.testing.assert_allclose(S, [[0.5, -0.5], [-0.5, 0.5]])


def test_kendall_all_degenerate():
    with pytest.raises(DegenerateDataError):
        kendall_tau_matrix(np.ones((4, 3)))
    with pytest.raises(InputError):
        kendall_tau_matrix(np.ones((1, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_kendall_trace_is_one(n, p, seed):
    X = np.random.default_rng(seed).standard_normal((n, p)) * np.random.default_rng(seed + 1).uniform(0.1, 10, p)
    S, _ = kendall_tau_matrix(X)
    assert abs(np.trace(S) - 1.0) <= 1e-12
    assert compute_local_kendall_tau(X).check_psd()


def test_kendall_subsample_policy():
    X = np.random.default_rng(1).standard_normal((60, 4))
    exact = compute_local_kendall_tau(X).matrix
    sub = compute_local_kendall_tau(X, Subsample(m=1000, seed=3)).matrix
    again = compute_local_kendall_tau(X, Subsample(m=1000, seed=3)).matrix
    np.testing.assert_array_equal(sub, again)
    assert np.max(np.abs(sub - exact)) < 0.05
    # asking for more pairs than exist falls back to all of them
    full = compute_local_kendall_tau(X, Subsample(m=10**6)).matrix
    np.testing.assert_allclose(full, exact, atol=1e-14)
    assert summarize(X, "kendall_tau").kind == "kendall_tau"


def test_local_top_r_examples():
    np.testing.assert_allclose(local_top_r(cov(np.diag([3.0, 1.0, 1.0])), 1)[:, 0], [1, 0, 0])


def test_local_top_r_strong_signal():
    p = 40
    spec = SpikedModelSpec(p=p, spikes=(10.0,))
    shard = sample_gaussian_spiked(spec, 5 * p, 1, 2)[0]
    assert projector_distance(local_top_r(compute_local_covariance(shard), 1), make_population(spec).basis) <= 0.3


def test_local_top_r_below_threshold_carries_no_signal():
    # l <= sqrt(p/n) = 1: the sample eigenvector is asymptotically orthogonal to u
    p = n = 500
    spec = SpikedModelSpec(p=p, spikes=(0.5,))
    u = make_population(spec).basis[:, 0]
    aligns = [abs(float(u @ local_top_r(compute_local_covariance(s), 1)[:, 0]))
              for s in sample_gaussian_spiked(spec, n, 100, 21)]
    assert np.mean(aligns) <= 0.15


def test_shifted_step_examples():
    step = shifted_step(cov(np.eye(4)), random_basis(4, 2, np.random.default_rng(0)))
    assert step.sigma2_local == pytest.approx(1.0)
    np.testing.assert_allclose(step.G, 0.0, atol=1e-15)

    step = shifted_step(cov(np.diag([3.0, 1.0, 1.0])), np.eye(3)[:, :1])
    assert step.sigma2_local == pytest.approx(1.0)
    np.testing.assert_allclose(step.G[:, 0], [2.0, 0.0, 0.0])

    rng = np.random.default_rng(3)
    u = random_basis(6, 1, rng)
    l = 2.5
    step = shifted_step(cov(l * u @ u.T + np.eye(6)), u)
    np.testing.assert_allclose(step.G, l * u, atol=1e-14)


def test_shifted_step_errors():
    with pytest.raises(DimensionError):
        shifted_step(cov(np.eye(2)), np.eye(2))
    with pytest.raises(DimensionError):
        shifted_step(cov(np.eye(3)), np.eye(4)[:, :1])


def test_unshifted_step_examples():
    U = random_basis(5, 2, np.random.default_rng(1))
    np.testing.assert_allclose(unshifted_step(cov(np.eye(5)), U), U)
    np.testing.assert_allclose(unshifted_step(cov(np.diag([3.0, 1.0, 1.0])), np.eye(3)[:, :1])[:, 0], [3, 0, 0])


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 15), st.integers(1, 2), st.integers(0, 2**32 - 1))
def test_shift_identity(p, r, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((p + 3, p))
    S = compute_local_covariance(X)
    U = random_basis(p, r, rng)
    step = shifted_step(S, U)
    np.testing.assert_allclose(unshifted_step(S, U) - step.G, step.sigma2_local * U, atol=1e-12, rtol=0)
    assert step.sigma2_local == pytest.approx(noise_level(S, U), abs=1e-14)
    assert step.sigma2_local >= -1e-12


def test_shift_concentrates_near_noise_level():
    p = n = 200
    spec = SpikedModelSpec(p=p, spikes=(3.0,))
    u = make_population(spec).basis
    vals = [shifted_step(compute_local_covariance(s), u).sigma2_local
            for s in sample_gaussian_spiked(spec, n, 100, 4)]
    assert 0.9 <= np.mean(vals) <= 1.1


def test_summary_invariants():
    with pytest.raises(InputError):
        LocalSummary("kendall_tau", np.eye(2), 2)
    with pytest.raises(InputError):
        LocalSummary("covariance", -np.eye(2), 2)
    assert not LocalSummary("covariance", [[1.0, 2.0], [2.0, 1.0]], 1).check_psd()
