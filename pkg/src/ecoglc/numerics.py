"""Dense linear-algebra and tensor primitives.

Matrices and 3-way tensors are plain ``float64`` numpy arrays; the helpers
``as_matrix`` / ``as_tensor3`` validate shape and finiteness at the boundary.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ContractError, DegenerateInputError

RIDGE_JITTER = 1e-10


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2:
        raise ContractError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ContractError(f"{name} must be non-empty, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ContractError(f"{name} has non-finite entries")
    return m


def as_tensor3(a, name: str = "tensor") -> np.ndarray:
    t = np.asarray(a, dtype=np.float64)
    if t.ndim != 3:
        raise ContractError(f"{name} must be 3-way, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ContractError(f"{name} has non-finite entries")
    return t


def _canonical_sign(v: np.ndarray, tol: float = 1e-12) -> float:
    """+1 or -1 so that the first entry of ``v`` with magnitude > tol becomes positive."""
    nz = np.flatnonzero(np.abs(v) > tol * max(1.0, float(np.max(np.abs(v)))))
    if nz.size == 0:
        return 1.0
    return 1.0 if v[nz[0]] > 0 else -1.0


def solve_least_squares(A, B) -> np.ndarray:
    """Minimise ``||A X - B||_F`` through the normal equations.

    A Cholesky solve is used when the Gram matrix has full numerical rank.
    Otherwise the Gram eigenvalues are inverted with a ridge jitter of
    ``1e-10`` (relative to the largest Gram diagonal) and the numerical null
    space is dropped, giving the minimum-norm solution up to O(jitter).
    """
    A = as_matrix(A, "A")
    B_in = np.asarray(B, dtype=np.float64)
    vector_rhs = B_in.ndim == 1
    B = as_matrix(B_in, "B")
    if A.shape[0] != B.shape[0]:
        raise ContractError(f"row mismatch: A is {A.shape}, B is {B.shape}")
    G = A.T @ A
    R = A.T @ B
    n = G.shape[0]
    scale = max(float(np.max(np.diag(G))), np.finfo(float).tiny)
    tol = scale * n * 1e-13
    if np.linalg.matrix_rank(G, tol=tol) == n:
        try:
            L = np.linalg.cholesky(G)
            X = np.linalg.solve(L.T, np.linalg.solve(L, R))
            return X[:, 0] if vector_rhs else X
        except np.linalg.LinAlgError:
            pass
    # singular Gram: jittered inverse on the range, zero on the numerical null space
    lam, V = np.linalg.eigh(G)
    inv = np.where(lam > tol, 1.0 / (lam + RIDGE_JITTER * scale), 0.0)
    X = V @ (inv[:, None] * (V.T @ R))
    return X[:, 0] if vector_rhs else X


class SingularTriplet(NamedTuple):
    u: np.ndarray
    s: float
    v: np.ndarray


def top_singular_triplet(M) -> SingularTriplet:
    """Dominant singular triplet of ``M``.

    Computed from the eigendecomposition of the smaller Gram matrix, so a
    9600 x 3 cross-covariance costs a 3 x 3 eigenproblem. The sign is fixed
    so that the first non-negligible entry of ``u`` is positive.
    """
    M = as_matrix(M, "M")
    if not np.any(M):
        raise DegenerateInputError("top singular triplet of an all-zero matrix")
    m, n = M.shape
    if n <= m:
        w, V = np.linalg.eigh(M.T @ M)
        v = V[:, -1]
        u = M @ v
        s = float(np.linalg.norm(u))
        u = u / s
    else:
        w, U = np.linalg.eigh(M @ M.T)
        u = U[:, -1]
        v = M.T @ u
        s = float(np.linalg.norm(v))
        v = v / s
    # one refinement sweep tightens the eigh-derived vector for clustered spectra
    v = M.T @ u
    s = float(np.linalg.norm(v))
    v /= s
    u = M @ v
    u /= np.linalg.norm(u)
    sign = _canonical_sign(u)
    return SingularTriplet(u * sign, s, v * sign)


class Rank1Tensor(NamedTuple):
    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray
    s: float


def contract(T: np.ndarray, w1=None, w2=None, w3=None):
    """Contract ``T`` with the given mode vectors; omitted modes stay free."""
    out = T
    # contract from the last mode so earlier axis numbers stay valid
    if w3 is not None:
        out = np.tensordot(out, w3, axes=([2], [0]))
    if w2 is not None:
        out = np.tensordot(out, w2, axes=([1], [0]))
    if w1 is not None:
        out = np.tensordot(out, w1, axes=([0], [0]))
    return out


def rank1_tensor_approx(T, *, max_iter: int = 200, tol: float = 1e-10,
                        history: list | None = None) -> Rank1Tensor:
    """Best rank-1 approximation of a 3-way tensor by higher-order power iteration.

    Initialised from the leading left singular vectors of the mode-2 and
    mode-3 unfoldings (deterministic). Each sweep updates w1, w2, w3 in turn;
    iteration stops when the largest change of any weight vector drops below
    ``tol`` or after ``max_iter`` sweeps. If ``history`` is given, the value
    ``s = T(w1, w2, w3)`` after every sweep is appended to it.
    """
    T = as_tensor3(T, "T")
    if not np.any(T):
        raise DegenerateInputError("rank-1 approximation of a zero tensor")
    d1, d2, d3 = T.shape
    w2 = top_singular_triplet(np.moveaxis(T, 1, 0).reshape(d2, -1)).u
    w3 = top_singular_triplet(np.moveaxis(T, 2, 0).reshape(d3, -1)).u
    w1 = contract(T, None, w2, w3)
    n1 = np.linalg.norm(w1)
    if n1 == 0.0:
        w1 = top_singular_triplet(T.reshape(d1, -1)).u
    else:
        w1 = w1 / n1

    T1 = T.reshape(d1, d2 * d3)
    for _ in range(max_iter):
        old = (w1, w2, w3)
        w1 = _normalized(T1 @ np.outer(w2, w3).ravel(), w1)
        M = (w1 @ T1).reshape(d2, d3)          # T contracted on mode 1
        w2 = _normalized(M @ w3, w2)
        w3 = _normalized(w2 @ M, w3)
        if history is not None:
            history.append(float(w2 @ M @ w3))
        change = max(_direction_change(a, b) for a, b in zip(old, (w1, w2, w3)))
        if change < tol:
            break

    s1 = _canonical_sign(w1)
    s2 = _canonical_sign(w2)
    w1, w2 = w1 * s1, w2 * s2
    s = float(contract(T, w1, w2, w3))
    if s < 0:
        w3, s = -w3, -s
    return Rank1Tensor(w1, w2, w3, s)


def _normalized(v: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return fallback if n == 0.0 else v / n


def _direction_change(a: np.ndarray, b: np.ndarray) -> float:
    # sign flips between sweeps are not progress, only direction changes are
    return float(min(np.linalg.norm(a - b), np.linalg.norm(a + b)))


def kron3(w1: np.ndarray, w2: np.ndarray, w3: np.ndarray) -> np.ndarray:
    """Flattened outer product in C order, matching ``T.reshape(-1)``."""
    return np.einsum("i,j,k->ijk", w1, w2, w3).reshape(-1)
