"""Dense small-dimension linear algebra and Gaussian-measure utilities.

All densities are computed and stored in log-scale throughout the package;
importance weights routinely span hundreds of orders of magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import solve_triangular

from .errors import EmptyInput, NotPositiveDefinite, NotPsd

LOG_2PI = np.log(2.0 * np.pi)

# Pivots at or below this are treated as factorization failures rather than
# silently propagating denormals/NaNs downstream.
_PIVOT_FLOOR = 1e-300


def symmetrize(m):
    """Return 0.5 * (m + m.T); storage-level symmetry for accumulated matrices."""
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


def cholesky(m):
    """Lower-triangular L with L @ L.T == m.

    Raises NotPositiveDefinite when a pivot is non-positive (or below the
    representable floor), which signals an invalid twisted covariance upstream.
    """
    m = np.asarray(m, dtype=float)
    try:
        lower = np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    if np.any(np.diag(lower) ** 2 <= _PIVOT_FLOOR):
        raise NotPositiveDefinite("cholesky pivot underflow")
    return lower


def is_positive_definite(m):
    try:
        cholesky(m)
    except NotPositiveDefinite:
        return False
    return True


def sqrtm_psd(m):
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues in [-1e-10 * spectral_radius, 0) are clamped to zero so the
    Bures metric stays usable near singular covariances; anything more
    negative raises NotPsd.
    """
    m = symmetrize(m)
    eigval, eigvec = np.linalg.eigh(m)
    radius = float(np.max(np.abs(eigval))) if eigval.size else 0.0
    if np.any(eigval < -1e-10 * max(radius, 1e-300)):
        raise NotPsd(f"eigenvalue {eigval.min():g} below PSD tolerance")
    root = eigvec * np.sqrt(np.clip(eigval, 0.0, None)) @ eigvec.T
    return symmetrize(root)


def log_sum_exp(values, axis=None):
    """Overflow-safe log(sum(exp(values))); -inf inputs are handled exactly."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise EmptyInput("log_sum_exp of empty sequence")
    if axis is None:
        peak = values.max()
        if not np.isfinite(peak):
            peak = 0.0
        return float(np.log(np.exp(values - peak).sum()) + peak)
    peak = np.max(values, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    return np.log(np.sum(np.exp(values - peak), axis=axis)) + np.squeeze(peak, axis=axis)


@dataclass(frozen=True)
class Gaussian:
    """Multivariate normal with positive-definite covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        object.__setattr__(self, "cov", symmetrize(np.atleast_2d(np.asarray(self.cov, dtype=float))))
        if self.cov.shape != (self.dim, self.dim):
            raise ValueError("mean/cov dimension mismatch")

    @property
    def dim(self):
        return self.mean.shape[0]

    @cached_property
    def chol(self):
        return cholesky(self.cov)

    @cached_property
    def log_det_cov(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    @cached_property
    def cov_inv(self):
        half = solve_triangular(self.chol, np.eye(self.dim), lower=True)
        return half.T @ half

    def logpdf(self, x):
        """Log-density, vectorized over the leading axis of ``x``."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x) - self.mean
        quad = ((pts @ self.cov_inv) * pts).sum(axis=1)
        out = -0.5 * (self.dim * LOG_2PI + self.log_det_cov + quad)
        return float(out[0]) if single else out

    def grad_logpdf(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x) - self.mean
        out = -(pts @ self.cov_inv)
        return out[0] if single else out

    def sample(self, rng, n=None):
        """x = mean + L z with z i.i.d. standard normal from ``rng``."""
        if n is None:
            return self.mean + self.chol @ rng.standard_normal(self.dim)
        z = rng.standard_normal((n, self.dim))
        return self.mean + z @ self.chol.T


def gaussian_logpdf(g: Gaussian, x):
    return g.logpdf(x)


def gaussian_sample(g: Gaussian, rng, n=None):
    return g.sample(rng, n)


def bures(cov1, cov2):
    """Bures metric between positive definite matrices.

    B^2 = tr(C1 + C2 - 2 (C1^{1/2} C2 C1^{1/2})^{1/2}), evaluated in its
    equivalent orthogonal-Procrustes form min_U ||L1 - L2 U||_F over square
    roots, which avoids the sqrt(eps) round-off floor of the trace form when
    the arguments (nearly) coincide.
    """
    cov1 = np.atleast_2d(np.asarray(cov1, dtype=float))
    cov2 = np.atleast_2d(np.asarray(cov2, dtype=float))
    l1 = cholesky(cov1)
    l2 = cholesky(cov2)
    u, _, vt = np.linalg.svd(l2.T @ l1)
    return float(np.linalg.norm(l1 - l2 @ (u @ vt)))


def w2_gaussian(g1: Gaussian, g2: Gaussian):
    """Exact 2-Wasserstein distance between Gaussians."""
    if g1.dim != g2.dim:
        raise ValueError("dimension mismatch")
    return float(np.sqrt(np.sum((g1.mean - g2.mean) ** 2) + bures(g1.cov, g2.cov) ** 2))


def gaussian_kl(g1: Gaussian, g2: Gaussian):
    """KL(g1 | g2) in nats."""
    if g1.dim != g2.dim:
        raise ValueError("dimension mismatch")
    diff = g2.mean - g1.mean
    sol_cov = np.linalg.solve(g2.cov, g1.cov)
    quad = float(diff @ np.linalg.solve(g2.cov, diff))
    return 0.5 * (np.trace(sol_cov) + quad - g1.dim + g2.log_det_cov - g1.log_det_cov)
