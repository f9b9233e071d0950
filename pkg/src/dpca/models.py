"""Synthetic data for spiked-covariance experiments.

Populations are ``Sigma = V diag(lam) V^T`` where the first ``r`` columns of
``V`` are the signal basis ``U``, signal eigenvalues are ``l_i + 1`` and the
remaining ``p - r`` noise eigenvalues follow a flat or linearly decaying
profile.  Observations are generated row-wise as ``x = A z`` with
``A = V diag(sqrt(lam))``, so coordinate ``j`` of the innovation ``z``
feeds population direction ``j``.

Every generator is a pure function of ``(spec, n, K, master_seed)``: shard
``k`` draws from its own stream derived from ``(master_seed, k)``.
"""
from __future__ import annotations

import functools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from scipy import stats

from .linalg import random_basis, sign_normalize

BasisMode = Literal["canonical", "random"]


@dataclass(frozen=True)
class SpikedModelSpec:
    """Spiked population.

    ``noise`` is ``(hi, lo)``: noise eigenvalues run linearly from ``hi`` down
    to ``lo``.  ``(1.0, 1.0)`` is the flat model.
    """

    p: int
    spikes: tuple[float, ...]
    noise: tuple[float, float] = (1.0, 1.0)
    basis_mode: BasisMode = "random"
    basis_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "spikes", tuple(float(s) for s in self.spikes))
        s = np.asarray(self.spikes)
        if s.size == 0 or s.size >= self.p:
            raise ValueError(f"need 1 <= r < p spikes, got r={s.size}, p={self.p}")
        if np.any(s <= 0) or np.any(np.diff(s) >= 0):
            raise ValueError(f"spikes must be positive and strictly decreasing: {self.spikes}")
        hi, lo = self.noise
        if not hi >= lo > 0:
            raise ValueError(f"noise profile needs hi >= lo > 0, got {self.noise}")
        if self.basis_mode not in ("canonical", "random"):
            raise ValueError(f"unknown basis mode {self.basis_mode!r}")

    @property
    def r(self) -> int:
        return len(self.spikes)

    @classmethod
    def linear_decay(cls, p, spikes, hi=1.2, lo=0.8, **kw) -> "SpikedModelSpec":
        return cls(p=p, spikes=tuple(spikes), noise=(hi, lo), **kw)


@dataclass(frozen=True)
class InnovationSpec:
    """Per-coordinate innovation law for :func:`sample_general`.

    ``alpha_signal``/``alpha_noise`` are skew-normal shape parameters; both
    zero gives the Gaussian family.  Draws are standardized to exactly zero
    mean and unit variance.
    """

    alpha_signal: float = 0.0
    alpha_noise: float = 0.0

    @property
    def family(self) -> str:
        return "gaussian" if self.alpha_signal == 0 and self.alpha_noise == 0 else "skew_gaussian"


@dataclass
class DatasetShard:
    machine_index: int
    data: np.ndarray  # (n, p)
    seed_used: int = 0

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def p(self) -> int:
        return self.data.shape[1]


@dataclass
class Population:
    sigma: np.ndarray
    basis: np.ndarray  # U, (p, r)
    noise_sigma2: float
    eigenvalues: np.ndarray  # (p,), signal first
    rotation: np.ndarray = field(repr=False)  # full orthogonal V, (p, p)

    @property
    def factor(self) -> np.ndarray:
        """``A`` with ``A A^T = Sigma`` and column j along population direction j."""
        return self.rotation * np.sqrt(self.eigenvalues)


@functools.lru_cache(maxsize=32)
def make_population(spec: SpikedModelSpec) -> Population:
    """Population covariance, signal basis and mean noise eigenvalue; cached and read-only."""
    p, r = spec.p, spec.r
    hi, lo = spec.noise
    noise = np.linspace(hi, lo, p - r)
    lam = np.concatenate([np.asarray(spec.spikes) + 1.0, noise])
    if spec.basis_mode == "canonical":
        V = np.eye(p)
    else:
        V = random_basis(p, p, np.random.default_rng(spec.basis_seed))
        V[:, :r] = sign_normalize(V[:, :r])
    sigma = (V * lam) @ V.T
    sigma = (sigma + sigma.T) / 2.0
    U = V[:, :r].copy()
    for a in (sigma, U, lam, V):
        a.flags.writeable = False
    return Population(sigma=sigma, basis=U, noise_sigma2=float(noise.mean()), eigenvalues=lam, rotation=V)


def shard_seed(master_seed: int, k: int) -> int:
    """64-bit seed for shard ``k``; hashing via ``SeedSequence`` keeps streams disjoint."""
    return int(np.random.SeedSequence([int(master_seed), int(k)]).generate_state(1, np.uint64)[0])


def derive_seed(master_seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), *map(int, keys)]).generate_state(1, np.uint64)[0])


def skewnorm_standardization(alpha: float) -> tuple[float, float]:
    """Closed-form mean and standard deviation of a standard skew-normal."""
    delta = alpha / np.sqrt(1.0 + alpha**2)
    mean = delta * np.sqrt(2.0 / np.pi)
    var = 1.0 - 2.0 * delta**2 / np.pi
    return float(mean), float(np.sqrt(var))


def _skewed_innovations(rng, n, p, r, alpha_signal, alpha_noise) -> np.ndarray:
    z = np.empty((n, p))
    for cols, alpha in ((slice(0, r), alpha_signal), (slice(r, p), alpha_noise)):
        width = len(range(*cols.indices(p)))
        if alpha == 0:
            z[:, cols] = rng.standard_normal((n, width))
        else:
            mean, sd = skewnorm_standardization(alpha)
            draws = stats.skewnorm.rvs(alpha, size=(n, width), random_state=rng)
            z[:, cols] = (draws - mean) / sd
    return z


def sample_gaussian_spiked(spec: SpikedModelSpec, n: int, K: int, master_seed: int) -> list[DatasetShard]:
    if n * K < 1:
        raise ValueError("need n*K >= 1")
    A = make_population(spec).factor
    shards = []
    for k in range(K):
        seed = shard_seed(master_seed, k)
        z = np.random.default_rng(seed).standard_normal((n, spec.p))
        shards.append(DatasetShard(k, z @ A.T, seed))
    return shards


def sample_general(
    spec: SpikedModelSpec, innovation: InnovationSpec, n: int, K: int, master_seed: int
) -> list[DatasetShard]:
    """Shards of ``x = A z`` with standardized (skew-)normal coordinates in ``z``."""
    A = make_population(spec).factor
    shards = []
    for k in range(K):
        seed = shard_seed(master_seed, k)
        rng = np.random.default_rng(seed)
        z = _skewed_innovations(rng, n, spec.p, spec.r, innovation.alpha_signal, innovation.alpha_noise)
        shards.append(DatasetShard(k, z @ A.T, seed))
    return shards


def sample_elliptical(
    spec: SpikedModelSpec,
    nu: float,
    n: int,
    K: int,
    master_seed: int,
    skew: tuple[float, float] = (0.0, 0.0),
) -> list[DatasetShard]:
    """Multivariate (skew-)t shards ``A g / sqrt(w / nu)`` with ``w ~ chi2(nu)``.

    ``nu = inf`` drops the radius and gives the Gaussian law.  The direction
    stream ``g`` and the radius stream ``w`` are independent children of
    the shard seed, so changing ``nu`` leaves ``g`` untouched.
    """
    if not nu > 0:
        raise ValueError(f"nu must be positive, got {nu}")
    A = make_population(spec).factor
    shards = []
    for k in range(K):
        seed = shard_seed(master_seed, k)
        g_rng, w_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
        g = _skewed_innovations(g_rng, n, spec.p, spec.r, *skew)
        if np.isinf(nu):
            scale = np.ones(n)
        else:
            scale = np.sqrt(w_rng.chisquare(nu, size=n) / nu)
        shards.append(DatasetShard(k, (g @ A.T) / scale[:, None], seed))
    return shards


# --- shard files -----------------------------------------------------------

SHARD_MAGIC = b"FPCA"
SHARD_VERSION = 1
_SHARD_HEADER = struct.Struct("<4sIIQQ")


def write_shard(path, shard: DatasetShard) -> None:
    data = np.ascontiguousarray(shard.data, dtype="<f8")
    n, p = data.shape
    with open(path, "wb") as fh:
        fh.write(_SHARD_HEADER.pack(SHARD_MAGIC, SHARD_VERSION, shard.machine_index, n, p))
        fh.write(data.tobytes(order="C"))


def read_shard(path, seed_used: int = 0) -> DatasetShard:
    raw = Path(path).read_bytes()
    if len(raw) < _SHARD_HEADER.size:
        raise ValueError(f"{path}: truncated shard header")
    magic, version, k, n, p = _SHARD_HEADER.unpack_from(raw)
    if magic != SHARD_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != SHARD_VERSION:
        raise ValueError(f"{path}: unsupported shard version {version}")
    body = raw[_SHARD_HEADER.size:]
    if len(body) != n * p * 8:
        raise ValueError(f"{path}: expected {n * p * 8} payload bytes, found {len(body)}")
    data = np.frombuffer(body, dtype="<f8").reshape(n, p).astype(np.float64)
    return DatasetShard(int(k), data, seed_used)


def write_shard_csv(path, shard: DatasetShard) -> None:
    np.savetxt(path, shard.data, delimiter=",", fmt="%.17g")


def stack_shards(shards: Sequence[DatasetShard]) -> np.ndarray:
    return np.vstack([s.data for s in sorted(shards, key=lambda s: s.machine_index)])
