"""Dense symmetric linear-algebra primitives with deterministic sign conventions.

Every basis returned from this module satisfies two conventions:

* columns are orthonormal, and
* in each column the entry of largest absolute value is non-negative
  (ties broken by the lowest row index).

These make estimates bit-reproducible no matter which transport or
reduction produced them.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
import scipy.linalg


class DimensionError(ValueError):
    """Raised when array shapes are incompatible with the requested operation."""


class InputError(ValueError):
    """Raised on non-finite or otherwise malformed numeric input."""


class RankError(np.linalg.LinAlgError):
    """Raised when a matrix expected to have full column rank does not."""


ORTHO_TOL = 1e-10
RANK_TOL = 1e-12


class EigPair(NamedTuple):
    values: np.ndarray  # (r,) non-increasing
    basis: np.ndarray  # (p, r) orthonormal, sign-normalized


def _check_finite(a: np.ndarray, what: str = "matrix") -> None:
    if not np.all(np.isfinite(a)):
        raise InputError(f"{what} contains non-finite entries")


def symmetrize(S) -> np.ndarray:
    """Return ``(S + S.T) / 2`` as a float64 array after shape/finiteness checks."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {S.shape}")
    _check_finite(S)
    return (S + S.T) / 2.0


def sign_normalize(B: np.ndarray) -> np.ndarray:
    """Flip column signs so the largest-magnitude entry of each column is >= 0.

    ``np.argmax`` returns the first maximal index, which gives the
    lowest-row tie-break for free.
    """
    B = np.array(B, dtype=np.float64, copy=True)
    if B.ndim == 1:
        B = B[:, None]
    if B.shape[1] == 0:
        return B
    idx = np.argmax(np.abs(B), axis=0)
    pivots = B[idx, np.arange(B.shape[1])]
    B[:, pivots < 0] *= -1.0
    return B


def is_basis(B: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    B = np.asarray(B)
    if B.ndim != 2 or B.shape[1] > B.shape[0]:
        return False
    G = B.T @ B
    return bool(np.max(np.abs(G - np.eye(B.shape[1])), initial=0.0) <= tol)


def sym_top_r_eig(S, r: int) -> EigPair:
    """Top-``r`` eigenpairs of a symmetric matrix.

    Parameters
    ----------
    S : (p, p) array_like
        Symmetric matrix. It is symmetrized before factorization, so
        rounding-level asymmetry is tolerated.
    r : int
        Number of algebraically largest eigenvalues to return.

    Returns
    -------
    EigPair
        ``values`` in non-increasing order and the matching eigenvectors as
        a sign-normalized ``(p, r)`` basis.
    """
    S = symmetrize(S)
    p = S.shape[0]
    if not 1 <= r <= p:
        raise DimensionError(f"need 1 <= r <= p, got r={r}, p={p}")
    k = min(p, r + 1)
    w, V = scipy.linalg.eigh(S, subset_by_index=[p - k, p - 1])
    w, V = w[::-1], V[:, ::-1]
    tol = TIE_TOL * max(1.0, float(np.max(np.abs(w))))
    if k > r and w[r - 1] - w[r] <= tol:
        # the eigenspace at position r continues past r: need every member
        w, V = np.linalg.eigh(S)
        w, V = w[::-1], V[:, ::-1]
    V = _canonicalize_clusters(w, V, r, tol)
    return EigPair(values=w[:r].copy(), basis=sign_normalize(V))


TIE_TOL = 1e-12


def _canonicalize_clusters(w: np.ndarray, V: np.ndarray, r: int, tol: float) -> np.ndarray:
    """Pick deterministic vectors inside repeated-eigenvalue clusters.

    Within a cluster spanning ``W``, vectors are built greedily from the
    projections ``W W^T e_i`` in increasing row order ``i``.
    """
    out = V[:, :r].copy()
    start = 0
    while start < r:
        stop = start + 1
        while stop < len(w) and w[stop - 1] - w[stop] <= tol:
            stop += 1
        if stop - start > 1:
            W = V[:, start:stop]
            need = min(stop, r) - start
            chosen: list[np.ndarray] = []
            for i in range(W.shape[0]):
                v = W @ W[i]
                for c in chosen:
                    v = v - c * (c @ v)
                nv = np.linalg.norm(v)
                if nv > 1e-8:
                    chosen.append(v / nv)
                    if len(chosen) == need:
                        break
            out[:, start:start + need] = np.column_stack(chosen)
        start = stop
    return out


def qr_orthonormalize(M) -> np.ndarray:
    """Orthonormal basis of ``span(M)`` from a thin QR with non-negative ``diag(R)``.

    Raises
    ------
    RankError
        If the smallest singular value of ``M`` is below ``1e-12`` times the
        largest, i.e. the iterate has collapsed.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim == 1:
        M = M[:, None]
    if M.ndim != 2 or M.shape[1] > M.shape[0] or M.shape[1] == 0:
        raise DimensionError(f"expected a tall p x r matrix, got shape {M.shape}")
    _check_finite(M)
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0.0 or s[-1] <= RANK_TOL * s[0]:
        raise RankError(f"matrix is numerically rank deficient (singular values {s})")
    Q, R = np.linalg.qr(M, mode="reduced")
    d = np.sign(np.diag(R))
    d[d == 0] = 1.0
    return sign_normalize(Q * d)


def projector_distance(U, V) -> float:
    """Frobenius distance ``||U U^T - V V^T||_F`` between two subspaces.

    Algebraically this is ``sqrt(2 (r - ||U^T V||_F^2))``. It is evaluated
    through the residual ``V - U (U^T V)``, which carries the same value
    without the cancellation that limits the trace form to ~1e-8.
    """
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if U.ndim == 1:
        U = U[:, None]
    if V.ndim == 1:
        V = V[:, None]
    if U.shape != V.shape:
        raise DimensionError(f"shape mismatch: {U.shape} vs {V.shape}")
    resid = V - U @ (U.T @ V)
    return float(np.sqrt(2.0) * np.linalg.norm(resid))


def projector_distance_trace(U, V) -> float:
    """The same distance via the trace identity; kept as an independent check."""
    U = np.atleast_2d(np.asarray(U, dtype=np.float64).T).T
    V = np.atleast_2d(np.asarray(V, dtype=np.float64).T).T
    if U.shape != V.shape:
        raise DimensionError(f"shape mismatch: {U.shape} vs {V.shape}")
    r = U.shape[1]
    return float(np.sqrt(max(2.0 * (r - np.linalg.norm(U.T @ V) ** 2), 0.0)))


def top_r_singular_values(M) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim == 1:
        M = M[:, None]
    _check_finite(M)
    return np.linalg.svd(M, compute_uv=False)


def random_basis(p: int, r: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed ``p x r`` orthonormal basis."""
    return qr_orthonormalize(rng.standard_normal((p, r)))
