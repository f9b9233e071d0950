"""Centralized estimators on the pooled sample, the targets for distributed runs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .linalg import DimensionError, sym_top_r_eig
from .models import DatasetShard
from .worker import PairPolicy, Subsample, kendall_tau_matrix

POOLED_KENDALL_EXACT_LIMIT = 10_000


@dataclass
class PooledEstimate:
    basis: np.ndarray
    eigenvalues: np.ndarray
    kind: str


def _ordered(shards: Sequence[DatasetShard]) -> list[DatasetShard]:
    shards = sorted(shards, key=lambda s: s.machine_index)
    if len({s.p for s in shards}) != 1:
        raise DimensionError("shards disagree on p")
    return shards


def pooled_covariance(shards: Sequence[DatasetShard]) -> np.ndarray:
    shards = _ordered(shards)
    p = shards[0].p
    S = np.zeros((p, p))
    N = 0
    for s in shards:
        S += s.data.T @ s.data
        N += s.n
    return S / N


def pooled_covariance_pca(shards: Sequence[DatasetShard], r: int) -> PooledEstimate:
    values, basis = sym_top_r_eig(pooled_covariance(shards), r)
    return PooledEstimate(basis, values, "covariance")


def pooled_kendall_pca(shards: Sequence[DatasetShard], r: int, pair_policy: PairPolicy | None = None,
                       seed: int = 0) -> PooledEstimate:
    """Kendall's tau over the union sample; subsampled pairs above 10^4 rows by default."""
    X = np.vstack([s.data for s in _ordered(shards)])
    N = X.shape[0]
    if pair_policy is None:
        pair_policy = "exact" if N <= POOLED_KENDALL_EXACT_LIMIT else Subsample(m=50 * N, seed=seed)
    S, _ = kendall_tau_matrix(X, pair_policy)
    S = (S + S.T) / 2.0
    S /= np.trace(S)
    values, basis = sym_top_r_eig(S, r)
    return PooledEstimate(basis, values, "kendall_tau")
