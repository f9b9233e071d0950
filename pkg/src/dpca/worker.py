"""Computation that runs on one local machine.

A worker owns a shard, turns it into a symmetric summary (sample
covariance or multivariate Kendall's tau), and answers the coordinator's
per-round requests: its local top-``r`` basis in round one, then shifted
(or unshifted) step matrices ``S U - s2 U`` at the broadcast basis.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Union

import numpy as np

from .linalg import DimensionError, InputError, sym_top_r_eig, symmetrize
from .models import DatasetShard

SummaryKind = Literal["covariance", "kendall_tau"]

PSD_TOL = 1e-10
DEGENERATE_PAIR_TOL = 1e-12
KENDALL_EXACT_LIMIT = 5000


class DegenerateDataError(ValueError):
    """All pairwise differences vanished; a Kendall matrix is undefined."""


@dataclass(frozen=True)
class Subsample:
    """Average over ``m`` unordered pairs drawn uniformly without replacement."""

    m: int
    seed: int = 0


PairPolicy = Union[Literal["exact"], Subsample]


@dataclass
class LocalSummary:
    kind: SummaryKind
    matrix: np.ndarray
    n_used: int

    def __post_init__(self):
        self.matrix = symmetrize(self.matrix)
        if self.kind not in ("covariance", "kendall_tau"):
            raise ValueError(f"unknown summary kind {self.kind!r}")
        # diagonal only; full PSD check is check_psd()
        if np.min(np.diag(self.matrix), initial=0.0) < -PSD_TOL:
            raise InputError("summary has a negative diagonal entry")
        if self.kind == "kendall_tau" and abs(np.trace(self.matrix) - 1.0) > 1e-9:
            raise InputError(f"Kendall summary has trace {np.trace(self.matrix)!r}, expected 1")

    @property
    def p(self) -> int:
        return self.matrix.shape[0]

    def check_psd(self, tol: float = PSD_TOL) -> bool:
        return bool(np.linalg.eigvalsh(self.matrix)[0] >= -tol)


@dataclass
class StepResult:
    G: np.ndarray
    sigma2_local: float


def compute_local_covariance(shard: DatasetShard | np.ndarray) -> LocalSummary:
    """``X^T X / n`` with no centering (the model is zero-mean)."""
    X = shard.data if isinstance(shard, DatasetShard) else np.asarray(shard, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InputError("empty shard")
    n = X.shape[0]
    return LocalSummary("covariance", X.T @ X / n, n)


def _pair_index(lin: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Map linear indices in ``[0, n(n-1)/2)`` to row-major pairs ``i < j``."""
    lin = np.asarray(lin, dtype=np.int64)
    total = n * (n - 1) // 2
    # count pairs from the end to keep the square-root argument well conditioned
    rev = total - 1 - lin
    t = ((np.sqrt(8.0 * rev + 1.0) - 1.0) / 2.0).astype(np.int64)
    # integer fix-ups for floating error in the square root
    t = np.where(t * (t + 1) // 2 > rev, t - 1, t)
    t = np.where((t + 1) * (t + 2) // 2 <= rev, t + 1, t)
    i = n - 2 - t
    j = n - 1 - (rev - t * (t + 1) // 2)
    return i, j


def _accumulate_pairs(X: np.ndarray, i: np.ndarray, j: np.ndarray, out: np.ndarray) -> int:
    D = X[i] - X[j]
    sq = np.einsum("ij,ij->i", D, D)
    keep = sq >= DEGENERATE_PAIR_TOL**2
    if not np.all(keep):
        D, sq = D[keep], sq[keep]
    out += (D / sq[:, None]).T @ D
    return int(D.shape[0])


def kendall_tau_matrix(X: np.ndarray, pair_policy: PairPolicy = "exact", chunk: int = 16384) -> tuple[np.ndarray, int]:
    """Multivariate Kendall's tau of the rows of ``X``.

    Returns the matrix and the number of non-degenerate pairs averaged.
    Pairs with ``||x_i - x_j|| < 1e-12`` are skipped and the divisor is
    reduced accordingly.
    """
    X = np.asarray(X, dtype=np.float64)
    n, p = X.shape
    if n < 2:
        raise InputError("Kendall's tau needs at least two observations")
    S = np.zeros((p, p))
    used = 0
    if pair_policy == "exact":
        total = n * (n - 1) // 2
        for s in range(0, total, chunk):
            i, j = _pair_index(np.arange(s, min(s + chunk, total)), n)
            used += _accumulate_pairs(X, i, j, S)
    elif isinstance(pair_policy, Subsample):
        total = n * (n - 1) // 2
        m = min(pair_policy.m, total)
        lin = np.random.default_rng(pair_policy.seed).choice(total, size=m, replace=False)
        lin.sort()
        for s in range(0, m, chunk):
            i, j = _pair_index(lin[s:s + chunk], n)
            used += _accumulate_pairs(X, i, j, S)
    else:
        raise ValueError(f"unknown pair policy {pair_policy!r}")
    if used == 0:
        raise DegenerateDataError("every pair of observations coincides")
    return S / used, used


def compute_local_kendall_tau(shard: DatasetShard | np.ndarray, pair_policy: PairPolicy = "exact") -> LocalSummary:
    X = shard.data if isinstance(shard, DatasetShard) else np.asarray(shard, dtype=np.float64)
    S, used = kendall_tau_matrix(X, pair_policy)
    S = symmetrize(S)
    # each pair term has unit trace; renormalize away accumulated rounding
    S /= np.trace(S)
    return LocalSummary("kendall_tau", S, X.shape[0])


def local_top_r(summary: LocalSummary, r: int) -> np.ndarray:
    return sym_top_r_eig(summary.matrix, r).basis


def _check_basis_shape(summary: LocalSummary, U: np.ndarray) -> np.ndarray:
    U = np.asarray(U, dtype=np.float64)
    if U.ndim == 1:
        U = U[:, None]
    if U.shape[0] != summary.p:
        raise DimensionError(f"basis has {U.shape[0]} rows, summary is {summary.p} x {summary.p}")
    return U


def noise_level(summary: LocalSummary, U: np.ndarray) -> float:
    """Average eigenvalue of the summary on the orthogonal complement of ``U``.

    Uses ``(tr S - tr(U^T S U)) / (p - r)``, which avoids forming the
    ``p x (p - r)`` complement basis.
    """
    U = _check_basis_shape(summary, U)
    p, r = U.shape
    if r >= p:
        raise DimensionError(f"shift undefined for r={r} >= p={p}")
    S = summary.matrix
    return float((np.trace(S) - np.einsum("ij,ij->", U, S @ U)) / (p - r))


def shifted_step(summary: LocalSummary, U: np.ndarray) -> StepResult:
    U = _check_basis_shape(summary, U)
    p, r = U.shape
    if r >= p:
        raise DimensionError(f"shift undefined for r={r} >= p={p}")
    SU = summary.matrix @ U
    s2 = float((np.trace(summary.matrix) - np.einsum("ij,ij->", U, SU)) / (p - r))
    return StepResult(G=SU - s2 * U, sigma2_local=s2)


def unshifted_step(summary: LocalSummary, U: np.ndarray) -> np.ndarray:
    U = _check_basis_shape(summary, U)
    return summary.matrix @ U


def summarize(shard: DatasetShard | np.ndarray, kind: SummaryKind, pair_policy: PairPolicy | None = None) -> LocalSummary:
    if kind == "covariance":
        return compute_local_covariance(shard)
    if kind == "kendall_tau":
        X = shard.data if isinstance(shard, DatasetShard) else shard
        if pair_policy is None:
            n = X.shape[0]
            pair_policy = "exact" if n <= KENDALL_EXACT_LIMIT else Subsample(m=50 * n)
        return compute_local_kendall_tau(X, pair_policy)
    raise ValueError(f"unknown summary kind {kind!r}")
