"""Multivariate Gaussian value type and closed-form operations.

The distribution is stored as a mean vector plus either a full symmetric
positive semidefinite covariance matrix or just its diagonal.  All operations
are pure; factorizations use Cholesky with a bounded escalating jitter ladder
(starting at 1e-10 times the mean diagonal, escalating by 10x up to 1e-4 times
the mean diagonal) so that failure is explicit rather than silent.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky as _scipy_cholesky
from scipy.linalg import solve_triangular

from .errors import DimensionMismatchError, SingularReferenceError

# Relative ladder of jitter multipliers applied to mean(diag(cov)).
_JITTER_LADDER = tuple(10.0 ** e for e in range(-10, -3))


class CovKind(enum.Enum):
    FULL = "full"
    DIAGONAL = "diagonal"


@dataclass(frozen=True)
class GaussianDist:
    """Gaussian with mean vector and full or diagonal covariance.

    Immutable after construction.  ``cov`` is an ``(n, n)`` symmetric PSD
    matrix for ``CovKind.FULL`` or an ``(n,)`` vector of variances for
    ``CovKind.DIAGONAL``.
    """

    mean: np.ndarray
    cov: np.ndarray
    kind: CovKind

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.cov, dtype=float)
        n = mean.shape[0]
        if self.kind is CovKind.FULL:
            if cov.shape != (n, n):
                raise DimensionMismatchError(
                    f"full covariance must be ({n}, {n}), got {cov.shape}"
                )
            scale = max(1.0, float(np.abs(cov).max()) if cov.size else 1.0)
            if float(np.abs(cov - cov.T).max()) > 1e-10 * scale:
                raise ValueError("covariance is not symmetric within 1e-10")
            cov = 0.5 * (cov + cov.T)
            diag = np.einsum("ii->i", cov)
        else:
            if cov.shape != (n,):
                raise DimensionMismatchError(
                    f"diagonal covariance must be ({n},), got {cov.shape}"
                )
            diag = cov
        if diag.size and float(diag.min()) < -1e-10 * max(1.0, float(np.abs(diag).max())):
            raise ValueError("covariance has a negative diagonal entry")
        # Clip roundoff-level negatives so downstream sqrt/factorization is safe.
        if self.kind is CovKind.DIAGONAL:
            cov = np.maximum(cov, 0.0)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def cov_matrix(self) -> np.ndarray:
        """Covariance as a dense (n, n) matrix regardless of kind."""
        if self.kind is CovKind.FULL:
            return self.cov
        return np.diag(self.cov)

    def cov_diagonal(self) -> np.ndarray:
        if self.kind is CovKind.FULL:
            return np.einsum("ii->i", self.cov).copy()
        return self.cov


def full_gaussian(mean, cov) -> GaussianDist:
    return GaussianDist(np.asarray(mean, dtype=float), np.asarray(cov, dtype=float), CovKind.FULL)


def diagonal_gaussian(mean, variances) -> GaussianDist:
    return GaussianDist(
        np.asarray(mean, dtype=float), np.asarray(variances, dtype=float), CovKind.DIAGONAL
    )


def standard_gaussian(n: int) -> GaussianDist:
    return diagonal_gaussian(np.zeros(n), np.ones(n))


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor with the jitter that was added to obtain it."""

    matrix: np.ndarray
    jitter_used: float


def cholesky_psd(cov: np.ndarray, *, what: str = "covariance") -> CholeskyFactor:
    """Cholesky-factorize ``cov``, escalating jitter until it succeeds.

    Raises:
        SingularReferenceError: no ladder entry makes the matrix factorizable.
    """
    cov = np.asarray(cov, dtype=float)
    base = float(np.mean(np.diag(cov))) if cov.size else 0.0
    jitters = [0.0] + [base * mult for mult in _JITTER_LADDER if base > 0.0]
    eye = np.eye(cov.shape[0])
    for jitter in jitters:
        try:
            lower = _scipy_cholesky(cov + jitter * eye, lower=True)
        except np.linalg.LinAlgError:
            continue
        return CholeskyFactor(lower, jitter)
    raise SingularReferenceError(
        f"{what} is singular: Cholesky failed up to jitter {jitters[-1]:g}",
        jitter_tried=jitters[-1],
    )


def psd_sqrt(dist: GaussianDist) -> CholeskyFactor:
    """A square root L with L @ L.T == cov, tolerating PSD rank deficiency.

    Tries the jittered Cholesky first; on failure falls back to a symmetric
    eigendecomposition with near-zero eigenvalues clipped, so exactly singular
    (e.g. all-zero) covariances still get an exact factor.
    """
    if dist.kind is CovKind.DIAGONAL:
        return CholeskyFactor(np.diag(np.sqrt(dist.cov)), 0.0)
    try:
        return cholesky_psd(dist.cov)
    except SingularReferenceError:
        pass
    eigvals, eigvecs = np.linalg.eigh(dist.cov)
    scale = max(1.0, float(eigvals.max()) if eigvals.size else 1.0)
    if eigvals.size and float(eigvals.min()) < -1e-10 * scale:
        raise SingularReferenceError(
            f"covariance is not PSD: min eigenvalue {eigvals.min():g}"
        )
    root = eigvecs * np.sqrt(np.maximum(eigvals, 0.0))
    return CholeskyFactor(root, 0.0)


def _check_same_dim(q: GaussianDist, p: GaussianDist):
    if q.dim != p.dim:
        raise DimensionMismatchError(f"dimension mismatch: {q.dim} vs {p.dim}")


def kl_divergence(q: GaussianDist, p: GaussianDist) -> float:
    """KL(q || p) in closed form; ``p`` must be full rank within jitter.

    Uses Cholesky solves and log-determinants throughout, never explicit
    inverses.  Both-diagonal inputs take an O(n) path.
    """
    _check_same_dim(q, p)
    n = q.dim
    if q.kind is CovKind.DIAGONAL and p.kind is CovKind.DIAGONAL:
        if np.any(p.cov <= 0.0):
            raise SingularReferenceError("reference covariance has a zero variance")
        if np.any(q.cov <= 0.0):
            raise SingularReferenceError("approximate covariance has a zero variance")
        ratio = q.cov / p.cov
        delta = q.mean - p.mean
        return 0.5 * float(
            np.sum(ratio) + np.sum(delta**2 / p.cov) - n - np.sum(np.log(ratio))
        )
    factor_p = cholesky_psd(p.cov_matrix(), what="reference covariance")
    factor_q = cholesky_psd(q.cov_matrix(), what="approximate covariance")
    lp, lq = factor_p.matrix, factor_q.matrix
    half_rotated = solve_triangular(lp, lq, lower=True)
    trace_term = float(np.sum(half_rotated**2))
    white_delta = solve_triangular(lp, q.mean - p.mean, lower=True)
    mean_term = float(white_delta @ white_delta)
    log_det_term = 2.0 * float(
        np.sum(np.log(np.diag(lp))) - np.sum(np.log(np.diag(lq)))
    )
    return 0.5 * (trace_term + mean_term - n + log_det_term)


def pushforward_linear(weights_dist: GaussianDist, linear_map: np.ndarray) -> GaussianDist:
    """Distribution of ``map @ w`` for ``w ~ weights_dist``; full kind.

    The result may be rank-deficient whenever the map has more rows than
    columns; callers diagnosing degeneracy rely on that.
    """
    linear_map = np.asarray(linear_map, dtype=float)
    if linear_map.ndim != 2 or linear_map.shape[1] != weights_dist.dim:
        raise DimensionMismatchError(
            f"map must have {weights_dist.dim} columns, got shape {linear_map.shape}"
        )
    mean = linear_map @ weights_dist.mean
    if weights_dist.kind is CovKind.DIAGONAL:
        cov = (linear_map * weights_dist.cov) @ linear_map.T
    else:
        cov = linear_map @ weights_dist.cov @ linear_map.T
    return full_gaussian(mean, 0.5 * (cov + cov.T))


def sample(
    dist: GaussianDist, rng: np.random.Generator, count: int
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``count`` samples; also return the standard-normal draws used.

    Samples are ``mean + eps @ L.T`` with eps ~ N(0, I), so a caller holding
    (mean, L) can differentiate through the draw (reparameterization).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    eps = rng.standard_normal((count, dist.dim))
    if dist.kind is CovKind.DIAGONAL:
        samples = dist.mean + eps * np.sqrt(dist.cov)
        return samples, eps
    root = psd_sqrt(dist)
    return dist.mean + eps @ root.matrix.T, eps


def log_density(dist: GaussianDist, x: np.ndarray):
    """Gaussian log-density at ``x`` (a vector, or a batch of row vectors)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    rows = x.reshape(1, -1) if single else x
    if rows.shape[1] != dist.dim:
        raise DimensionMismatchError(
            f"points must have dimension {dist.dim}, got {rows.shape[1]}"
        )
    delta = rows - dist.mean
    if dist.kind is CovKind.DIAGONAL:
        if np.any(dist.cov <= 0.0):
            raise SingularReferenceError("diagonal covariance has a zero variance")
        quad = np.sum(delta**2 / dist.cov, axis=1)
        log_det = float(np.sum(np.log(dist.cov)))
    else:
        factor = cholesky_psd(dist.cov, what="covariance for log-density")
        white = solve_triangular(factor.matrix, delta.T, lower=True)
        quad = np.sum(white**2, axis=0)
        log_det = 2.0 * float(np.sum(np.log(np.diag(factor.matrix))))
    values = -0.5 * (dist.dim * np.log(2.0 * np.pi) + log_det + quad)
    return float(values[0]) if single else values
