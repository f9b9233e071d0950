"""Closed-form random-matrix predictions and experiment metrics.

All spike arguments are signal strengths ``l_i`` of the model
``Sigma = sum_i l_i u_i u_i^T + I``; ``c`` is the aspect ratio ``p / n`` of
one machine.
"""
from __future__ import annotations

import enum
import math
from typing import Sequence

import numpy as np

from .linalg import DimensionError, projector_distance


class RegimeError(ValueError):
    """The requested limit is undefined in this signal regime."""


class UndefinedMetricError(ValueError):
    pass


class RegimeLabel(str, enum.Enum):
    BELOW_POOL_THRESHOLD = "below_pool_threshold"
    PHASE_GAP = "phase_gap"
    ABOVE_LOCAL_THRESHOLD = "above_local_threshold"
    STRONG_LOCAL = "strong_local"


def phase_thresholds(c: float, K: int) -> tuple[float, float]:
    """``(local, pooled)`` detection thresholds ``(sqrt(c), sqrt(c / K))``."""
    return math.sqrt(c), math.sqrt(c / K)


def classify_regime(l_r: float, c: float, K: int, strong_multiplier: float = 10.0) -> RegimeLabel:
    """Regime of the weakest spike.  Boundaries are strict: ``l == sqrt(c)`` is sub-threshold."""
    local, pooled = phase_thresholds(c, K)
    if l_r <= pooled:
        return RegimeLabel.BELOW_POOL_THRESHOLD
    if l_r <= local:
        return RegimeLabel.PHASE_GAP
    if l_r >= strong_multiplier * local:
        return RegimeLabel.STRONG_LOCAL
    return RegimeLabel.ABOVE_LOCAL_THRESHOLD


def _spikes(spikes) -> np.ndarray:
    l = np.atleast_1d(np.asarray(spikes, dtype=np.float64))
    if l.size == 0 or np.any(l <= 0):
        raise ValueError(f"spikes must be positive, got {spikes}")
    return l


def pooled_mse_limit(p: int, n: int, K: int, spikes) -> float:
    """Limit of ``E ||U_P U_P^T - U U^T||_F^2`` for PCA on all ``K n`` samples."""
    l = _spikes(spikes)
    return float(np.sum(2.0 * (p / l + p / l**2)) / (K * n))


def oneround_mse_limit(p: int, n: int, K: int, spikes) -> float:
    """Limit of the same error for the projector-averaging estimator.

    Requires every spike above the local threshold, i.e. ``n > p / l_i^2``.
    """
    l = _spikes(spikes)
    denom = n - p / l**2
    if np.any(denom <= 0):
        raise RegimeError(f"spike(s) {l[denom <= 0]} at or below the local threshold sqrt(p/n)")
    return float(np.sum(2.0 * (p / l + p / l**2) / denom) / K)


def variance_ratio_limit(p: int, n: int, spikes) -> float:
    """Asymptotic error ratio of the one-round estimator to the pooled one (> 1)."""
    return oneround_mse_limit(p, n, 1, spikes) / pooled_mse_limit(p, n, 1, spikes)


def eigenvalue_limit(l: float, c: float) -> float:
    """Almost-sure limit of the sample spike eigenvalue."""
    if l > math.sqrt(c):
        return 1.0 + l + c * (1.0 + l) / l
    return (1.0 + math.sqrt(c)) ** 2


def alignment_limit(l: float, c: float) -> float:
    """Almost-sure limit of ``(u^T u_hat)^2`` for a sample spike eigenvector."""
    if l > math.sqrt(c):
        return (1.0 - c / l**2) / (1.0 + c / l)
    return 0.0


def average_retention(U: np.ndarray, test_rows: np.ndarray) -> float:
    """Share of the test set's squared norm kept by projecting onto ``span(U)``."""
    U = np.asarray(U, dtype=np.float64)
    X = np.atleast_2d(np.asarray(test_rows, dtype=np.float64))
    if U.ndim == 1:
        U = U[:, None]
    if X.shape[1] != U.shape[0]:
        raise DimensionError(f"test rows have {X.shape[1]} columns, basis has {U.shape[0]} rows")
    total = float(np.sum(X * X))
    if X.size == 0 or total == 0.0:
        raise UndefinedMetricError("retention is undefined for an empty or all-zero test set")
    kept = float(np.sum((X @ U) ** 2))
    return min(max(kept / total, 0.0), 1.0)


def variance_ratio_empirical(errors_distributed: Sequence[float], errors_pooled: Sequence[float]) -> float:
    return float(np.mean(errors_distributed) / np.mean(errors_pooled))


def kendall_population_eigenvalue(scatter_eigenvalues, j: int, mc_draws: int = 200_000, seed: int = 0,
                                  chunk: int = 50_000) -> tuple[float, float]:
    """Monte-Carlo eigenvalue ``j`` (0-based) of the population Kendall matrix.

    Estimates ``E[lam_j Y_j^2 / sum_i lam_i Y_i^2]`` for ``Y ~ N(0, I_p)`` and
    returns ``(estimate, standard_error)``.
    """
    lam = np.asarray(scatter_eigenvalues, dtype=np.float64)
    if not 0 <= j < lam.size:
        raise DimensionError(f"index {j} out of range for {lam.size} eigenvalues")
    rng = np.random.default_rng(seed)
    total = total_sq = 0.0
    done = 0
    while done < mc_draws:
        m = min(chunk, mc_draws - done)
        Y2 = rng.standard_normal((m, lam.size)) ** 2
        ratio = lam[j] * Y2[:, j] / (Y2 @ lam)
        total += ratio.sum()
        total_sq += (ratio**2).sum()
        done += m
    mean = total / mc_draws
    var = max(total_sq / mc_draws - mean**2, 0.0) * mc_draws / max(mc_draws - 1, 1)
    return float(mean), float(math.sqrt(var / mc_draws))


def squared_error(U_hat: np.ndarray, U: np.ndarray) -> float:
    """``||U_hat U_hat^T - U U^T||_F^2``."""
    return projector_distance(U, U_hat) ** 2
