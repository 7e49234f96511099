"""Small numeric helpers shared across modules."""
from __future__ import annotations

import numpy as np

LOG2PI = float(np.log(2.0 * np.pi))


def logsumexp(a, axis=None):
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    # rows that are all -inf stay -inf instead of producing nan
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def floor_spd(cov: np.ndarray, floor: float) -> np.ndarray:
    """Project a matrix onto the symmetric cone with eigenvalues >= floor.

    Symmetrizes first; eigenvalues below the floor are clipped up. For a zero
    matrix this reduces to floor * I.
    """
    cov = np.asarray(cov, dtype=float)
    sym = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(sym)
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T


def chol_lower(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as e:
        raise np.linalg.LinAlgError(
            f"covariance not positive definite (min eig "
            f"{np.linalg.eigvalsh(0.5 * (cov + cov.T)).min():.3e})"
        ) from e


def mvn_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Log density of N(mean, cov) at x; x and mean broadcast over leading axes."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = x.shape[-1]
    if d == 0:
        # empty event space: the density of a point mass is 1
        return np.zeros(x.shape[:-1])
    L = chol_lower(cov)
    resid = x - mean
    z = np.linalg.solve(L, resid[..., None])[..., 0]
    maha = np.sum(z * z, axis=-1)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return -0.5 * (d * LOG2PI + logdet + maha)


def mvn_sample(rng: np.random.Generator, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    if mean.shape[-1] == 0:
        return np.zeros_like(mean)
    L = chol_lower(cov)
    return mean + L @ rng.standard_normal(mean.shape[-1])
