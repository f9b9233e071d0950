import numpy as np
import pytest

from dpca.linalg import projector_distance, qr_orthonormalize
from dpca.models import SpikedModelSpec, make_population, sample_elliptical, sample_gaussian_spiked
from dpca.oracle import pooled_covariance, pooled_covariance_pca, pooled_kendall_pca
from dpca.worker import Subsample, compute_local_covariance, local_top_r, shifted_step, LocalSummary


def test_single_shard_equals_local():
    spec = SpikedModelSpec(p=12, spikes=(3.0, 1.5))
    shards = sample_gaussian_spiked(spec, 40, 1, 0)
    np.testing.assert_allclose(pooled_covariance_pca(shards, 2).basis,
                               local_top_r(compute_local_covariance(shards[0]), 2), atol=1e-12)


def test_pooled_equals_mean_of_local_summaries():
    spec = SpikedModelSpec(p=12, spikes=(3.0, 1.5))
    shards = sample_gaussian_spiked(spec, 40, 6, 1)
    mean = sum(compute_local_covariance(s).matrix for s in shards) / 6
    np.testing.assert_allclose(pooled_covariance(shards), mean, atol=1e-12)
    est = pooled_covariance_pca(list(reversed(shards)), 2)
    assert np.all(np.diff(est.eigenvalues) <= 0)


def test_pooled_kendall_trace_and_policy():
    spec = SpikedModelSpec(p=6, spikes=(3.0,))
    shards = sample_elliptical(spec, 3.0, 30, 3, 2)
    exact = pooled_kendall_pca(shards, 1)
    sub = pooled_kendall_pca(shards, 1, Subsample(m=2000, seed=1))
    assert exact.kind == "kendall_tau"
    # trace-normalized: all eigenvalues lie in (0, 1] and the top share exceeds 1 / p
    full = pooled_kendall_pca(shards, 6)
    assert abs(full.eigenvalues.sum() - 1.0) <= 1e-12
    assert exact.eigenvalues[0] > 1 / 6
    assert projector_distance(exact.basis, sub.basis) < 0.2


def test_kendall_and_covariance_agree_on_gaussian_data():
    spec = SpikedModelSpec(p=10, spikes=(4.0,))
    shards = sample_gaussian_spiked(spec, 100, 3, 3)
    assert projector_distance(pooled_kendall_pca(shards, 1).basis, pooled_covariance_pca(shards, 1).basis) <= 0.2


def test_kendall_beats_covariance_on_heavy_tails():
    spec = SpikedModelSpec(p=30, spikes=(5.0, 3.0, 2.0))
    U = make_population(spec).basis
    kt, cv = [], []
    for rep in range(10):
        shards = sample_elliptical(spec, 3.0, 100, 4, 40 + rep)
        kt.append(projector_distance(pooled_kendall_pca(shards, 3).basis, U) ** 2)
        cv.append(projector_distance(pooled_covariance_pca(shards, 3).basis, U) ** 2)
    assert np.mean(kt) < np.mean(cv)


def test_pooled_basis_is_shifted_fixed_point():
    spec = SpikedModelSpec(p=20, spikes=(4.0, 2.0))
    shards = sample_gaussian_spiked(spec, 50, 4, 9)
    S = pooled_covariance(shards)
    P = pooled_covariance_pca(shards, 2).basis
    step = shifted_step(LocalSummary("covariance", S, 200), P)
    w = np.linalg.eigvalsh(S - step.sigma2_local * np.eye(20))
    assert abs(w[-2]) - abs(w[-3]) > 1e-8
    assert projector_distance(qr_orthonormalize(step.G), P) <= 1e-10
