"""Dense linear-algebra and seeded random kernels shared by every solver."""

import logging

import numpy as np
from scipy.linalg import solve_triangular

logger = logging.getLogger(__name__)

PIVOT_TOL = 1e-12
RIDGE_FACTOR = 1e-10

_DTYPE = np.float64


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a Cholesky pivot falls at or below ``PIVOT_TOL``."""


def set_precision(bits):
    """Select 64-bit (default) or 32-bit reals for newly created matrices."""
    global _DTYPE
    if bits == 64:
        _DTYPE = np.float64
    elif bits == 32:
        _DTYPE = np.float32
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


def default_dtype():
    return _DTYPE


def seeded_rng(seed):
    """Return a PCG64 generator; PCG64 streams are stable across platforms."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def cholesky_factor(a):
    """Lower-triangular ``L`` with ``L @ L.T == a``.

    Raises NotPositiveDefinite when any pivot ``L[j, j]**2`` is at or below
    ``PIVOT_TOL``.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"cholesky_factor needs a square matrix, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if not np.allclose(a, a.T, rtol=1e-10, atol=1e-10 * scale):
        raise ValueError("cholesky_factor needs a symmetric matrix")
    try:
        low = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    pivots = np.diag(low) ** 2
    if np.any(~np.isfinite(pivots)) or np.any(pivots <= PIVOT_TOL):
        raise NotPositiveDefinite(f"smallest pivot {pivots.min():.3e}")
    return low


def _solve_with_factor(low, b):
    y = solve_triangular(low, b, lower=True, check_finite=False)
    return solve_triangular(low.T, y, lower=False, check_finite=False)


def solve_spd(a, b, auto_ridge=True):
    """Solve ``a @ X = b`` for symmetric positive-definite ``a``.

    If factorization fails and ``auto_ridge`` is set, retries once with
    ``RIDGE_FACTOR * trace(a) / dim`` added to the diagonal.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != a.shape[0]:
        raise ValueError(f"row mismatch: a is {a.shape}, b is {b.shape}")
    try:
        low = cholesky_factor(a)
    except NotPositiveDefinite:
        if not auto_ridge:
            raise
        ridge = RIDGE_FACTOR * max(float(np.trace(a)), 1.0) / a.shape[0]
        logger.warning("near-singular system (dim %d); adding ridge %.3e", a.shape[0], ridge)
        low = cholesky_factor(a + ridge * np.eye(a.shape[0]))
    return _solve_with_factor(low, b)


def gaussian_matrix(rows, cols, scale, rng):
    """i.i.d. N(0, scale**2) entries."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return (scale * rng.standard_normal((rows, cols))).astype(_DTYPE, copy=False)
