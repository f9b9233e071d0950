"""Central-machine logic of few-round distributed PCA.

Round 1 averages the workers' local projectors and takes the top-``r``
eigenbasis.  Every later round broadcasts the current basis ``U``, collects
``G_k = S_k U - s2_k U`` from each worker, and QR-orthonormalizes their
mean.  Because the mean of the ``G_k`` equals ``(S_pooled - mean(s2_k) I) U``,
each round is one exact shifted power step on the pooled matrix, carried
out without moving any data.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Literal, Sequence, Union

import numpy as np

from .linalg import DimensionError, RankError, qr_orthonormalize, random_basis, sign_normalize, sym_top_r_eig
from .models import DatasetShard
from .netsim import (CommLog, Flag, MsgType, RoundMessage, Session, WorkerNode, Command, control_message,
                     start_local_tcp_workers)
from .worker import LocalSummary, PairPolicy, StepResult

EIGENGAP_TOL = 1e-12
DEGENERATE_VARIANCE_TOL = 1e-14


class DegenerateAggregationWarning(UserWarning):
    """The averaged projector has (numerically) no gap at position ``r``."""


class CollapsedIterateError(RankError):
    """The aggregated step matrix lost rank; restart from a new initialization."""


class DegenerateDirectionError(ValueError):
    pass


# --- round policies ----------------------------------------------------------

@dataclass(frozen=True)
class Fixed:
    T: int


@dataclass(frozen=True)
class BiasSchedule:
    """Rounds for noise heterogeneity ``delta = O((pr/Kn)^alpha)``."""

    alpha: float
    eps: float = 0.5


@dataclass(frozen=True)
class LogSchedule:
    """Rounds growing like ``log^(1+eps)(Kn / (pr))`` for bounded heterogeneity."""

    eps: float = 0.5


RoundPolicy = Union[Fixed, BiasSchedule, LogSchedule]


def bias_schedule_rounds(alpha: float, eps: float = 0.5) -> int:
    if alpha <= 0 or eps <= 0:
        raise ValueError("alpha and eps must be positive")
    return max(3, math.ceil((2 * alpha + 1) / (2 * alpha) + eps))


def log_schedule_rounds(K: int, n: int, p: int, r: int, eps: float = 0.5) -> int:
    """``ceil(log(Kn/(pr))^(1+eps))``, never fewer than two rounds."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    ratio = K * n / (p * r)
    base = math.log(ratio) if ratio > 1 else 0.0
    return max(2, math.ceil(base ** (1 + eps)))


def resolve_rounds(policy: RoundPolicy, K: int | None = None, n: int | None = None,
                   p: int | None = None, r: int | None = None) -> int:
    if isinstance(policy, Fixed):
        return policy.T
    if isinstance(policy, BiasSchedule):
        return bias_schedule_rounds(policy.alpha, policy.eps)
    if isinstance(policy, LogSchedule):
        if None in (K, n, p, r):
            raise ValueError("log schedule needs K, n, p and r")
        return log_schedule_rounds(K, n, p, r, policy.eps)
    raise ValueError(f"unknown round policy {policy!r}")


# --- configuration and results -------------------------------------------------

@dataclass(frozen=True)
class IterationConfig:
    r: int
    T: int = 2
    shift_mode: Literal["shifted", "unshifted"] = "shifted"
    estimator_kind: Literal["covariance", "kendall_tau"] = "covariance"
    inference_mode: bool = False
    round_policy: RoundPolicy | None = None  # overrides T when set
    init: Literal["oneround", "random"] = "oneround"
    init_seed: int = 0

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.shift_mode not in ("shifted", "unshifted"):
            raise ValueError(f"unknown shift mode {self.shift_mode!r}")
        if self.estimator_kind not in ("covariance", "kendall_tau"):
            raise ValueError(f"unknown estimator kind {self.estimator_kind!r}")
        if self.init not in ("oneround", "random"):
            raise ValueError(f"unknown init {self.init!r}")

    def rounds(self, K=None, n=None, p=None) -> int:
        if self.round_policy is None:
            return self.T
        return resolve_rounds(self.round_policy, K, n, p, self.r)

    def flags(self) -> Flag:
        f = Flag(0)
        if self.estimator_kind == "kendall_tau":
            f |= Flag.KENDALL
        if self.shift_mode == "unshifted":
            f |= Flag.UNSHIFTED
        if self.inference_mode:
            f |= Flag.INFERENCE
        if self.init == "oneround":
            f |= Flag.SEND_LOCAL_BASIS
        return f


@dataclass
class DistributedEstimate:
    basis: np.ndarray  # U^(T)
    rounds_run: int
    spiked_eigenvalue_estimates: np.ndarray | None
    sigma2_global_per_round: list[float]  # one per consensus round; nan when not observed
    comm_log: CommLog
    history: list[np.ndarray] = field(default_factory=list)  # U^(1) .. U^(T)
    singular_values_per_round: list[np.ndarray] = field(default_factory=list)
    eigen_basis: np.ndarray | None = None  # left singular vectors of the last aggregate
    warnings: list[str] = field(default_factory=list)


# --- reductions ------------------------------------------------------------------

def _mean_ascending(mats: Sequence[np.ndarray]) -> np.ndarray:
    acc = np.zeros_like(np.asarray(mats[0], dtype=np.float64))
    for m in mats:
        acc += m
    return acc / len(mats)


def aggregate_one_round(bases: Sequence[np.ndarray], warn_list: list[str] | None = None) -> np.ndarray:
    """Top-``r`` eigenbasis of the mean of the local projectors (ascending ``k``)."""
    if not bases:
        raise ValueError("need at least one basis")
    shapes = {np.shape(B) for B in bases}
    if len(shapes) != 1:
        raise DimensionError(f"bases disagree in shape: {sorted(shapes)}")
    p, r = np.shape(bases[0])
    P = _mean_ascending([B @ B.T for B in bases])
    values, basis = sym_top_r_eig(P, min(r + 1, p))
    if r < p and values[r - 1] - values[r] < EIGENGAP_TOL:
        msg = f"mean projector has eigengap {values[r - 1] - values[r]:.3g} at position {r}"
        warnings.warn(msg, DegenerateAggregationWarning, stacklevel=2)
        if warn_list is not None:
            warn_list.append(msg)
    return basis[:, :r].copy() if r < p else basis


def _consensus_matrix(steps: Sequence[StepResult]) -> np.ndarray:
    shapes = {s.G.shape for s in steps}
    if len(shapes) != 1:
        raise DimensionError(f"step matrices disagree in shape: {sorted(shapes)}")
    return _mean_ascending([s.G for s in steps])


def aggregate_consensus(steps: Sequence[StepResult]) -> tuple[np.ndarray, float, np.ndarray]:
    """QR basis, mean shift and singular values of the averaged step matrix."""
    M = _consensus_matrix(steps)
    try:
        basis = qr_orthonormalize(M)
    except RankError as exc:
        raise CollapsedIterateError(str(exc)) from exc
    sigma2 = float(np.mean([s.sigma2_local for s in steps]))
    return basis, sigma2, np.linalg.svd(M, compute_uv=False)


def estimate_spiked_eigenvalues(singular_values, sigma2_global: float | None = None) -> np.ndarray:
    """Spike estimates ``l_hat_i``: the aggregate's singular values as they are.

    The shift already removed the noise level, so ``l_hat_i + sigma2_global``
    estimates the full eigenvalue ``lambda_i`` when that is wanted.
    """
    return np.array(singular_values, dtype=np.float64)


# --- driver ------------------------------------------------------------------------

def _steps_from_messages(msgs: list[dict[MsgType, RoundMessage]], U: np.ndarray,
                         cfg: IterationConfig) -> list[StepResult]:
    steps = []
    for m in msgs:
        payload = m[MsgType.STEP_UP].payload
        if payload.shape != U.shape:
            raise DimensionError(f"step from machine {m[MsgType.STEP_UP].machine_index} has shape "
                                 f"{payload.shape}, expected {U.shape}")
        if cfg.shift_mode == "unshifted":
            steps.append(StepResult(payload, math.nan))
        elif cfg.inference_mode:
            s2 = float(m[MsgType.SCALAR_UP].payload[0, 0])
            steps.append(StepResult(payload - s2 * U, s2))
        else:
            steps.append(StepResult(payload, math.nan))
    return steps


def run_distributed_pca(session: Session, cfg: IterationConfig, *, n: int | None = None,
                        p: int | None = None) -> DistributedEstimate:
    """Run the full protocol over ``session``.

    ``p`` is needed for random initialization and ``n``/``p`` for the log
    round schedule; otherwise they are learned from the round-1 uplink.
    """
    K = session.K
    flags = cfg.flags()
    notes: list[str] = []
    session.broadcast(lambda k: control_message(k, 1, Command.CONFIGURE, cfg.r, flags))
    if cfg.init == "oneround":
        got = session.gather(1, [MsgType.BASIS_UP])
        U = aggregate_one_round([m[MsgType.BASIS_UP].payload for m in got], notes)
    else:
        if p is None:
            raise ValueError("random initialization needs p")
        U = random_basis(p, cfg.r, np.random.default_rng(cfg.init_seed))
    p = U.shape[0]
    T = cfg.rounds(K, n, p)

    history = [U]
    sigma2s: list[float] = []
    svals: list[np.ndarray] = []
    M = None
    types = [MsgType.STEP_UP]
    if cfg.inference_mode and cfg.shift_mode == "shifted":
        types.append(MsgType.SCALAR_UP)
    for t in range(2, T + 1):
        U_prev = U
        session.broadcast(lambda k: RoundMessage(MsgType.BASIS_DOWN, k, t, U_prev))
        steps = _steps_from_messages(session.gather(t, types), U_prev, cfg)
        M = _consensus_matrix(steps)
        try:
            U = qr_orthonormalize(M)
        except RankError as exc:
            raise CollapsedIterateError(f"round {t}: {exc}") from exc
        sigma2s.append(float(np.mean([s.sigma2_local for s in steps])))
        svals.append(np.linalg.svd(M, compute_uv=False))
        history.append(U)

    spikes = eigen_basis = None
    if M is not None:
        left, s, _ = np.linalg.svd(M, full_matrices=False)
        eigen_basis = sign_normalize(left)
        if cfg.shift_mode == "shifted":
            spikes = estimate_spiked_eigenvalues(s, sigma2s[-1])
    return DistributedEstimate(basis=U, rounds_run=T, spiked_eigenvalue_estimates=spikes,
                               sigma2_global_per_round=sigma2s, comm_log=session.log, history=history,
                               singular_values_per_round=svals, eigen_basis=eigen_basis, warnings=notes)


def make_nodes(data: Sequence[DatasetShard | LocalSummary], pair_policy: PairPolicy | None = None) -> list[WorkerNode]:
    """One worker per shard (or precomputed summary), indexed by position."""
    nodes = []
    for k, item in enumerate(data):
        if isinstance(item, LocalSummary):
            nodes.append(WorkerNode(k, summary=item))
        else:
            nodes.append(WorkerNode(k, shard=item, pair_policy=pair_policy))
    return nodes


def distributed_pca(data: Sequence[DatasetShard | LocalSummary], cfg: IterationConfig, *,
                    transport: str = "inprocess", shuffle_seed: int | None = None,
                    pair_policy: PairPolicy | None = None) -> DistributedEstimate:
    """Convenience wrapper: spin up workers for ``data`` and run the protocol.

    ``transport="tcp"`` serves every worker on a localhost port and talks
    to it over real sockets.
    """
    nodes = make_nodes(data, pair_policy)
    first = data[0]
    p = first.p
    n = first.n if isinstance(first, DatasetShard) else first.n_used
    if transport == "inprocess":
        session = Session.inprocess(nodes, shuffle_seed)
    elif transport == "tcp":
        addresses, _ = start_local_tcp_workers(nodes)
        session = Session.tcp(addresses)
    else:
        raise ValueError(f"unknown transport {transport!r}")
    with session:
        return run_distributed_pca(session, cfg, n=n, p=p)


# --- inference ------------------------------------------------------------------------

def _bilinear_variance(u, v, B, l, s2) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    B = np.asarray(B, dtype=np.float64)
    if B.ndim == 1:
        B = B[:, None]
    l = np.atleast_1d(np.asarray(l, dtype=np.float64))
    if l.size != B.shape[1]:
        raise DimensionError(f"{l.size} spikes for a rank-{B.shape[1]} basis")
    bu, bv = B.T @ u, B.T @ v
    perp = lambda a, b, ba, bb: float(a @ b - ba @ bb)  # a^T (I - B B^T) b
    w = (l + s2) / l**2
    return (perp(u, u, bu, bu) * float(np.sum(w * bv**2))
            + perp(v, v, bv, bv) * float(np.sum(w * bu**2))
            + 2.0 * perp(u, v, bu, bv) * float(np.sum(w * bu * bv)))


def population_bilinear_variance(u, v, U, spikes, sigma2: float = 1.0) -> float:
    """Asymptotic variance of ``sqrt(Kn) <u, (U_hat U_hat^T - U U^T) v>`` for Gaussian data.

    Uses weights ``(l_i + sigma2) / l_i^2``; ``sigma2 = 1`` is the population
    noise level of the spiked model.
    """
    return _bilinear_variance(u, v, U, spikes, sigma2)


def estimated_bilinear_variance(u, v, est: DistributedEstimate) -> float:
    """Plug-in variance from the final basis, spike estimates and previous-round shift."""
    if est.spiked_eigenvalue_estimates is None or not est.sigma2_global_per_round:
        raise ValueError("estimate carries no spike/shift estimates; run shifted with T >= 2")
    s2 = est.sigma2_global_per_round[-1]
    if not np.isfinite(s2):
        raise ValueError("shift level was not transmitted; run with inference_mode=True")
    return _bilinear_variance(u, v, est.eigen_basis, est.spiked_eigenvalue_estimates, s2)


def bilinear_statistic(u, v, est: DistributedEstimate, truth: np.ndarray, K: int, n: int) -> tuple[float, float]:
    """Standardized bilinear form ``sqrt(Kn) <u, (U_hat U_hat^T - U U^T) v> / sigma_hat``."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    s2 = estimated_bilinear_variance(u, v, est)
    if s2 <= DEGENERATE_VARIANCE_TOL:
        raise DegenerateDirectionError(f"estimated variance {s2:.3g} is not positive for this (u, v)")
    Uh = est.basis
    U = np.asarray(truth, dtype=np.float64)
    if U.ndim == 1:
        U = U[:, None]
    form = float((u @ Uh) @ (Uh.T @ v) - (u @ U) @ (U.T @ v))
    return math.sqrt(K * n) * form / math.sqrt(s2), s2
