"""Forward and backward Markov transition kernels.

Covers affine-Gaussian kernels with exact conjugate twisting, the
Euler-Maruyama discretization of overdamped Langevin dynamics with first-
and second-order twist approximations, the matching approximate backward
(reversal) kernels, and a preconditioned MALA rejuvenation step.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import solve_triangular

from .errors import HessianNotUsable, NonFiniteGradient, NotPositiveDefinite, TwistNotIntegrable
from .linalg import LOG_2PI, cholesky, symmetrize
from .policy import QuadraticPolicy, identity_policy


@dataclass(frozen=True)
class GaussianKernel:
    """Affine-Gaussian transition x' | x ~ N(K x + r, H)."""

    K: np.ndarray
    r: np.ndarray
    H: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "K", np.atleast_2d(np.asarray(self.K, dtype=float)))
        object.__setattr__(self, "r", np.atleast_1d(np.asarray(self.r, dtype=float)))
        object.__setattr__(self, "H", symmetrize(np.atleast_2d(np.asarray(self.H, dtype=float))))

    @property
    def dim(self):
        return self.r.shape[0]

    @cached_property
    def chol_h(self):
        return cholesky(self.H)

    @cached_property
    def log_det_h(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.chol_h))))

    @cached_property
    def h_inv(self):
        identity = np.eye(self.dim)
        half = solve_triangular(self.chol_h, identity, lower=True)
        return half.T @ half

    def mean(self, x_prev):
        return np.atleast_2d(x_prev) @ self.K.T + self.r

    def sample(self, x_prev, rng):
        x_prev = np.asarray(x_prev, dtype=float)
        single = x_prev.ndim == 1
        mu = self.mean(x_prev)
        z = rng.standard_normal(mu.shape)
        out = mu + z @ self.chol_h.T
        return out[0] if single else out

    def logpdf(self, x_prev, x):
        x_prev = np.asarray(x_prev, dtype=float)
        single = x_prev.ndim == 1 and np.asarray(x).ndim == 1
        diff = np.atleast_2d(x) - self.mean(x_prev)
        quad = ((diff @ self.h_inv) * diff).sum(axis=1)
        out = -0.5 * (self.dim * LOG_2PI + self.log_det_h + quad)
        return float(out[0]) if single else out


@dataclass(frozen=True)
class TwistResult:
    kernel: GaussianKernel
    log_normalizer: QuadraticPolicy  # log M(psi)(x) = log_normalizer.log_value(x)


def exact_twist(kernel: GaussianKernel, policy: QuadraticPolicy,
                with_normalizer=True) -> TwistResult:
    """Conjugate twist of an affine-Gaussian kernel by a quadratic policy.

    Returns the twisted kernel N(K'x + r', H') with
        H' = (H^{-1} + 2A)^{-1},  K' = H' H^{-1} K,  r' = H' (H^{-1} r - b),
    and the log-normalizer log M(psi)(x), itself a quadratic in x (so it can
    seed the next backward-recursion step directly). ``with_normalizer=False``
    skips the normalizer when only the kernel is needed.
    """
    a_mat = policy.a_matrix()
    h_inv = kernel.h_inv
    prec = symmetrize(h_inv + 2.0 * a_mat)
    try:
        chol_prec = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as exc:
        raise TwistNotIntegrable("H^{-1} + 2A has a non-positive eigenvalue") from exc
    half = solve_triangular(chol_prec, np.eye(kernel.dim), lower=True, check_finite=False)
    h_new = half.T @ half  # (H^{-1} + 2A)^{-1}
    hk = h_inv @ kernel.K
    k_new = h_new @ hk
    r_new = h_new @ (h_inv @ kernel.r - policy.b)
    twisted = GaussianKernel(k_new, r_new, h_new)
    # precision, determinant and a square root are already in hand: seed the
    # caches (half.T satisfies S S' = H', which is all sampling needs)
    twisted.__dict__["h_inv"] = prec
    twisted.__dict__["log_det_h"] = -2.0 * float(np.sum(np.log(np.diag(chol_prec))))
    twisted.__dict__["chol_h"] = half.T
    if not with_normalizer:
        return TwistResult(twisted, None)

    # log M(psi)(x) from the Gaussian integral; G = H^{-1} - H^{-1} P^{-1} H^{-1}.
    p_inv = h_new
    g_mat = h_inv - h_inv @ p_inv @ h_inv
    a_out = symmetrize(0.5 * kernel.K.T @ g_mat @ kernel.K)
    b_out = kernel.K.T @ (g_mat @ kernel.r + h_inv @ (p_inv @ policy.b))
    # log det(I + 2HA) = log det(H) + log det(H^{-1} + 2A)
    logdet = kernel.log_det_h + 2.0 * float(np.sum(np.log(np.diag(chol_prec))))
    c_out = (
        policy.c
        + 0.5 * logdet
        + 0.5 * kernel.r @ g_mat @ kernel.r
        + kernel.r @ h_inv @ p_inv @ policy.b
        - 0.5 * policy.b @ p_inv @ policy.b
    )
    return TwistResult(twisted, QuadraticPolicy(a_out, b_out, c_out))


def quadratic_gaussian_integral(means, cov, policy: QuadraticPolicy):
    """log int N(y; m, C) psi(y) dy for each row m, with psi the quadratic policy.

    Closed form: -c - 0.5 log det(I + 2CA)
    + 0.5 (C^{-1}m - b)' (C^{-1} + 2A)^{-1} (C^{-1}m - b) - 0.5 m' C^{-1} m.
    """
    means = np.atleast_2d(np.asarray(means, dtype=float))
    d = means.shape[1]
    a_mat = policy.a_matrix()
    chol_c = cholesky(cov)
    identity = np.eye(d)
    half = solve_triangular(chol_c, identity, lower=True)
    c_inv = half.T @ half
    prec = symmetrize(c_inv + 2.0 * a_mat)
    try:
        chol_prec = cholesky(prec)
    except NotPositiveDefinite as exc:
        raise TwistNotIntegrable("I + 2CA has a non-positive eigenvalue") from exc
    p_half = solve_triangular(chol_prec, identity, lower=True)
    p_inv = p_half.T @ p_half
    sign, logdet = np.linalg.slogdet(identity + 2.0 * cov @ a_mat)
    vec = means @ c_inv.T - policy.b
    quad = ((vec @ p_inv) * vec).sum(axis=1)
    base = ((means @ c_inv) * means).sum(axis=1)
    return -policy.c - 0.5 * logdet + 0.5 * quad - 0.5 * base


def clamp_policy_for_twist(policy: QuadraticPolicy, h_inv, eps):
    """Project A so that H^{-1} + 2A >= eps I, preserving b and c.

    Used by IPF when a fitted increment makes the twist non-integrable;
    clamping keeps the iteration moving instead of aborting.
    """
    prec = symmetrize(h_inv + 2.0 * policy.a_matrix())
    try:
        # cheap accept path: already comfortably positive definite
        np.linalg.cholesky(prec - eps * np.eye(prec.shape[0]))
        return policy
    except np.linalg.LinAlgError:
        pass
    eigval, eigvec = np.linalg.eigh(prec)
    if np.all(eigval >= eps):
        return policy
    clamped = eigvec * np.maximum(eigval, eps) @ eigvec.T
    a_new = symmetrize(0.5 * (clamped - h_inv))
    if policy.diagonal:
        return QuadraticPolicy(np.diag(a_new), policy.b, policy.c, diagonal=True)
    return QuadraticPolicy(a_new, policy.b, policy.c)


@dataclass(frozen=True)
class EulerKernel:
    """One-step Euler-Maruyama kernel N(x + drift(x), c I).

    drift is a vectorized callable (N,d)->(N,d); None means the driftless
    (Brownian) special case.
    """

    drift_fn: object
    c: float
    dim: int

    def drift(self, x_prev):
        pts = np.atleast_2d(np.asarray(x_prev, dtype=float))
        if self.drift_fn is None:
            return np.zeros_like(pts)
        out = self.drift_fn(pts)
        if not np.all(np.isfinite(out)):
            raise NonFiniteGradient("non-finite drift gradient")
        return out

    def mean(self, x_prev):
        return np.atleast_2d(x_prev) + self.drift(x_prev)

    def sample(self, x_prev, rng):
        x_prev = np.asarray(x_prev, dtype=float)
        single = x_prev.ndim == 1
        mu = self.mean(x_prev)
        out = mu + np.sqrt(self.c) * rng.standard_normal(mu.shape)
        return out[0] if single else out

    def logpdf(self, x_prev, x):
        x_prev = np.asarray(x_prev, dtype=float)
        single = x_prev.ndim == 1 and np.asarray(x).ndim == 1
        diff = np.atleast_2d(x) - self.mean(x_prev)
        out = -0.5 * (self.dim * (LOG_2PI + np.log(self.c)) + np.sum(diff**2, axis=1) / self.c)
        return float(out[0]) if single else out


def em_kernel(path, t, h) -> EulerKernel:
    """Langevin kernel targeting pi_t: N(x + (h/2) grad log pi_t(x), h I)."""
    return EulerKernel(lambda pts: 0.5 * h * path.grad_log_gamma_t(t, pts), float(h), path.dim)


def brownian_kernel(dim, h, sigma=1.0) -> EulerKernel:
    return EulerKernel(None, float(sigma**2 * h), dim)


def em_sample(kernel: EulerKernel, x_prev, rng):
    return kernel.sample(x_prev, rng)


def em_logpdf(kernel: EulerKernel, x_prev, x):
    return kernel.logpdf(x_prev, x)


def _order2_cov(policy: QuadraticPolicy, c, dim):
    """Covariance (I/c + 2A)^{-1} of the order-2 twist and log det(I/c + 2A)."""
    prec = symmetrize(np.eye(dim) / c + 2.0 * policy.a_matrix())
    try:
        chol_prec = cholesky(prec)
    except NotPositiveDefinite as exc:
        raise HessianNotUsable("I/c - hess log psi is not positive definite") from exc
    identity = np.eye(dim)
    half = solve_triangular(chol_prec, identity, lower=True)
    cov = symmetrize(half.T @ half)
    logdet_prec = 2.0 * float(np.sum(np.log(np.diag(chol_prec))))
    return cov, logdet_prec


def taylor_twist_mean_cov(kernel: EulerKernel, policy: QuadraticPolicy, order, x_prev):
    """Mean and covariance of the Taylor-twisted kernel at each x_prev row.

    Order 1 linearizes log psi around x_prev: the mean shifts by
    c grad log psi(x_prev) and the covariance stays c I (returned as None).
    Order 2 keeps the constant Hessian -2A and completes the square, giving
    covariance (I/c + 2A)^{-1}.
    """
    pts = np.atleast_2d(np.asarray(x_prev, dtype=float))
    base_mean = kernel.mean(pts)
    grad = policy.grad_log(pts)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("non-finite policy gradient")
    if order == 1:
        return base_mean + kernel.c * grad, None
    if order == 2:
        cov, _ = _order2_cov(policy, kernel.c, kernel.dim)
        # stationary point: (I/c + 2A) y = m/c + grad + 2 A x = m/c - b
        rhs = base_mean / kernel.c + grad + 2.0 * pts @ policy.a_matrix()
        return rhs @ cov, cov
    raise ValueError(f"order must be 1 or 2, got {order}")


def taylor_twist_sample(kernel: EulerKernel, policy, order, x_prev, rng):
    x_prev = np.asarray(x_prev, dtype=float)
    single = x_prev.ndim == 1
    mean, cov = taylor_twist_mean_cov(kernel, policy, order, x_prev)
    z = rng.standard_normal(mean.shape)
    if cov is None:
        out = mean + np.sqrt(kernel.c) * z
    else:
        out = mean + z @ cholesky(cov).T
    return out[0] if single else out


def taylor_twist_logpdf(kernel: EulerKernel, policy, order, x_prev, x):
    x_prev = np.asarray(x_prev, dtype=float)
    single = x_prev.ndim == 1 and np.asarray(x).ndim == 1
    mean, cov = taylor_twist_mean_cov(kernel, policy, order, x_prev)
    diff = np.atleast_2d(x) - mean
    if cov is None:
        out = -0.5 * (
            kernel.dim * (LOG_2PI + np.log(kernel.c)) + np.sum(diff**2, axis=1) / kernel.c
        )
    else:
        chol_cov = cholesky(cov)
        z = solve_triangular(chol_cov, diff.T, lower=True)
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol_cov))))
        out = -0.5 * (kernel.dim * LOG_2PI + logdet + np.sum(z**2, axis=0))
    return float(out[0]) if single else out


def taylor_log_normalizer(kernel: EulerKernel, policy, order, x_prev):
    """log M(psi_bar)(x_prev) for the order-1 or order-2 linearized twist.

    Order 1: log psi(x) + grad log psi(x)' mu + (c/2) ||grad log psi(x)||^2
    with mu the base drift; for the Langevin kernel this reads
    log psi + (h/2) grad log psi' [grad log pi + grad log psi].
    """
    pts = np.atleast_2d(np.asarray(x_prev, dtype=float))
    single = np.asarray(x_prev).ndim == 1
    log_psi = policy.log_value(pts)
    grad = policy.grad_log(pts)
    mu = kernel.drift(pts)
    if order == 1:
        out = log_psi + np.sum(grad * mu, axis=1) + 0.5 * kernel.c * np.sum(grad**2, axis=1)
    elif order == 2:
        cov, logdet_prec = _order2_cov(policy, kernel.c, kernel.dim)
        vec = mu / kernel.c + grad
        quad = ((vec @ cov) * vec).sum(axis=1)
        out = (
            log_psi
            - 0.5 * (logdet_prec + kernel.dim * np.log(kernel.c))
            + 0.5 * quad
            - 0.5 * np.sum(mu**2, axis=1) / kernel.c
        )
    else:
        raise ValueError(f"order must be 1 or 2, got {order}")
    return float(out[0]) if single else out


class BackwardKernel:
    """Approximate reversal of the twisted forward dynamics:
    N(x_{t-1}; x_t + (c/2) grad log pi_{t-1}(x_t) - c grad log psi_t(x_t), c I)."""

    def __init__(self, path, t, c, policy: QuadraticPolicy | None = None):
        self.path = path
        self.t = t
        self.c = float(c)
        self.policy = policy if policy is not None else identity_policy(path.dim)
        self.dim = path.dim

    def mean(self, x_t):
        pts = np.atleast_2d(np.asarray(x_t, dtype=float))
        g = self.path.grad_log_gamma_t(self.t - 1, pts)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("non-finite backward drift gradient")
        mu = pts + 0.5 * self.c * g
        if not self.policy.is_identity():
            mu = mu - self.c * self.policy.grad_log(pts)
        return mu

    def sample(self, x_t, rng):
        x_t = np.asarray(x_t, dtype=float)
        single = x_t.ndim == 1
        mu = self.mean(x_t)
        out = mu + np.sqrt(self.c) * rng.standard_normal(mu.shape)
        return out[0] if single else out

    def logpdf(self, x_t, x_prev):
        x_t = np.asarray(x_t, dtype=float)
        single = x_t.ndim == 1 and np.asarray(x_prev).ndim == 1
        diff = np.atleast_2d(x_prev) - self.mean(x_t)
        out = -0.5 * (self.dim * (LOG_2PI + np.log(self.c)) + np.sum(diff**2, axis=1) / self.c)
        return float(out[0]) if single else out


def backward_logpdf(path, policy, t, x_t, x_prev, c):
    return BackwardKernel(path, t, c, policy).logpdf(x_t, x_prev)


def backward_sample(path, policy, t, x_t, rng, c):
    return BackwardKernel(path, t, c, policy).sample(x_t, rng)


def mala_step(log_gamma, grad_log_gamma, x, step, diag_scale, rng):
    """One Metropolis-adjusted Langevin step, preconditioned by diag(diag_scale).

    Proposal N(x + (step/2) D grad(x), step D); the acceptance ratio includes
    the proposal asymmetry. Rows are updated independently; rejected rows are
    returned unchanged. step == 0 returns x.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    if step == 0.0:
        return x.copy()
    scale = np.atleast_1d(np.asarray(diag_scale, dtype=float))
    if np.any(scale <= 0.0):
        raise ValueError("diag_scale must be strictly positive")
    sd = np.sqrt(step * scale)

    def prop_mean(z):
        return z + 0.5 * step * np.atleast_2d(grad_log_gamma(z)) * scale

    cur_lp = np.atleast_1d(log_gamma(pts))
    mean_fwd = prop_mean(pts)
    prop = mean_fwd + sd * rng.standard_normal(pts.shape)
    prop_lp = np.atleast_1d(log_gamma(prop))
    mean_bwd = prop_mean(prop)
    log_q_fwd = -0.5 * np.sum((prop - mean_fwd) ** 2 / (step * scale), axis=1)
    log_q_bwd = -0.5 * np.sum((pts - mean_bwd) ** 2 / (step * scale), axis=1)
    log_alpha = prop_lp - cur_lp + log_q_bwd - log_q_fwd
    accept = np.log(rng.uniform(size=pts.shape[0])) < log_alpha
    out = np.where(accept[:, None], prop, pts)
    return out[0] if single else out
