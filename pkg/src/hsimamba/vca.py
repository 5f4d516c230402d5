"""Vertex component analysis for endmember initialization."""
from __future__ import annotations

import math

import numpy as np


class VCAError(ValueError):
    pass


def estimate_snr(Y: np.ndarray, mean: np.ndarray, projected: np.ndarray) -> float:
    """SNR estimate (dB) from the signal energy captured by a p-dim subspace."""
    bands, n = Y.shape
    p = projected.shape[0]
    p_y = np.sum(Y ** 2) / n
    p_x = np.sum(projected ** 2) / n + np.sum(mean ** 2)
    num = p_x - p / bands * p_y
    den = p_y - p_x
    if den <= 0 or num <= 0:
        return math.inf
    return float(10 * np.log10(num / den))


def _leading_vectors(M: np.ndarray, k: int, step: str) -> np.ndarray:
    u, s, _ = np.linalg.svd(M)
    rank_tol = s[0] * max(M.shape) * np.finfo(float).eps * 1e3 if s[0] > 0 else 0.0
    if k > 0 and (s[0] == 0 or s[k - 1] <= rank_tol):
        raise VCAError(
            f"{step}: data spans fewer than {k} independent directions "
            f"(singular values {np.array2string(s[:k], precision=3)})"
        )
    return u[:, :k]


def vca(Y: np.ndarray, P: int, seed: int = 0, snr_db: float | None = None
        ) -> tuple[np.ndarray, np.ndarray, float]:
    """Extract ``P`` endmembers from ``Y[C, N]`` (one spectrum per column).

    Returns ``(endmembers[P, C], pixel_indices[P], snr_db)``. Below the SNR
    threshold ``15 + 10 log10(P)`` the data are projected onto the (P-1)-dim
    affine subspace and lifted projectively; above it they are projected onto
    the P-dim signal subspace and rescaled by ``1 / (x . mean)``.
    """
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2:
        raise VCAError("expected a [bands, pixels] matrix")
    bands, n = Y.shape
    if not 1 <= P <= bands:
        raise VCAError(f"endmember count must lie in [1, {bands}], got {P}")
    if n < P:
        raise VCAError(f"need at least {P} pixels, got {n}")
    rng = np.random.default_rng(seed)

    mean = Y.mean(axis=1, keepdims=True)
    centred = Y - mean
    if snr_db is None:
        ud = _leading_vectors(centred @ centred.T / n, max(P - 1, 1), "zero-mean subspace projection")
        snr_db = estimate_snr(Y, mean, ud.T @ centred)
    threshold = 15 + 10 * math.log10(P)

    if P == 1:
        ud = _leading_vectors(Y @ Y.T / n, 1, "signal subspace projection")
        idx = int(np.argmax(np.abs(ud[:, 0] @ Y)))
        return Y[:, [idx]].T.copy(), np.array([idx]), snr_db

    if snr_db < threshold:
        d = P - 1
        ud = _leading_vectors(centred @ centred.T / n, d, "zero-mean subspace projection")
        x = ud.T @ centred
        c = np.sqrt(np.max(np.sum(x ** 2, axis=0)))
        y = np.vstack([x, np.full((1, n), c)])
    else:
        d = P
        ud = _leading_vectors(Y @ Y.T / n, d, "signal subspace projection")
        x = ud.T @ Y
        u = x.mean(axis=1, keepdims=True)
        denom = np.sum(x * u, axis=0)
        if np.any(np.abs(denom) < 1e-300):
            raise VCAError("projective rescaling: pixel orthogonal to the mean direction")
        y = x / denom

    indices = np.zeros(P, dtype=np.int64)
    basis = np.zeros((P, P))
    basis[-1, 0] = 1.0
    for i in range(P):
        w = rng.random((P, 1))
        f = w - basis @ (np.linalg.pinv(basis) @ w)
        norm = np.linalg.norm(f)
        if norm == 0:
            raise VCAError(f"orthogonal direction search: degenerate direction at step {i}")
        v = (f / norm).T @ y
        indices[i] = int(np.argmax(np.abs(v)))
        basis[:, i] = y[:, indices[i]]
    return Y[:, indices].T.copy(), indices, snr_db
