"""Target-distribution sequences: annealing paths, the conjugate Gaussian
(LQG) path, and the logistic-regression posterior.

Convention: the unnormalized terminal target is gamma(x) = pi_0(x) exp(l(x)),
prior times unnormalized likelihood, so Z_0 = 1 and the normalizing-constant
estimators below target the marginal likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import gammaln

from .errors import OutOfRange
from .linalg import LOG_2PI, Gaussian, cholesky


@dataclass(frozen=True)
class Schedule:
    """Annealing schedule lambda_t on [0:T]: linear t/T or quadratic (t/T)^2."""

    kind: str
    T: int

    def __post_init__(self):
        if self.kind not in ("linear", "quadratic"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.T < 1:
            raise ValueError("T must be positive")

    def value(self, t):
        if t < 0 or t > self.T:
            raise OutOfRange(f"t={t} outside [0:{self.T}]")
        frac = t / self.T
        return frac if self.kind == "linear" else frac**2


def schedule_value(s: Schedule, t):
    return s.value(t)


class GaussianBase:
    """Gaussian base distribution exposing sample/logpdf/grad."""

    def __init__(self, gaussian: Gaussian):
        self.gaussian = gaussian
        self.dim = gaussian.dim

    def sample(self, rng, n):
        return self.gaussian.sample(rng, n)

    def logpdf(self, x):
        return self.gaussian.logpdf(x)

    def grad_logpdf(self, x):
        return self.gaussian.grad_logpdf(x)


class StudentTBase:
    """Product of independent Student-t margins (center 0)."""

    def __init__(self, dim, df=4.0, scale=2.5):
        self.dim = dim
        self.df = float(df)
        self.scale = float(scale)
        self._log_norm = (
            gammaln((self.df + 1.0) / 2.0)
            - gammaln(self.df / 2.0)
            - 0.5 * np.log(self.df * np.pi)
            - np.log(self.scale)
        )

    def sample(self, rng, n):
        return self.scale * rng.standard_t(self.df, size=(n, self.dim))

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x) / self.scale
        per = self._log_norm - ((self.df + 1.0) / 2.0) * np.log1p(pts**2 / self.df)
        out = per.sum(axis=1)
        return float(out[0]) if single else out

    def grad_logpdf(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        out = -(self.df + 1.0) * pts / (self.df * self.scale**2 + pts**2)
        return out[0] if single else out


class AnnealingPath:
    """Geometric interpolation gamma_t = pi_0^(1-lambda_t) gamma^lambda_t.

    With gamma = pi_0 exp(loglik) this reduces to
    log gamma_t = log pi_0 + lambda_t * loglik.
    """

    def __init__(self, base, loglik, grad_loglik, schedule: Schedule, fast_grad=None):
        self.base = base
        self.loglik = loglik
        self.grad_loglik = grad_loglik
        self.schedule = schedule
        self.dim = base.dim
        self.T = schedule.T
        self._fast_grad = fast_grad  # optional fused affine gradient

    def lam(self, t):
        return self.schedule.value(t)

    def sample_base(self, rng, n):
        return self.base.sample(rng, n)

    def log_gamma(self, x):
        return self.base.logpdf(x) + self.loglik(x)

    def log_gamma_t(self, t, x):
        lam = self.lam(t)
        out = self.base.logpdf(x)
        if lam > 0.0:
            out = out + lam * self.loglik(x)
        return out

    def grad_log_gamma_t(self, t, x):
        if self._fast_grad is not None:
            return self._fast_grad(t, x)
        lam = self.lam(t)
        out = self.base.grad_logpdf(x)
        if lam > 0.0:
            out = out + lam * self.grad_loglik(x)
        return out


def log_gamma_t(path: AnnealingPath, t, x):
    return path.log_gamma_t(t, x)


def grad_log_gamma_t(path: AnnealingPath, t, x):
    return path.grad_log_gamma_t(t, x)


@dataclass(frozen=True)
class LqgModel:
    """Gaussian prior N(mu0, Sigma0) with log-likelihood -(y-x)'R^{-1}(y-x)/2.

    R has unit diagonal and rho off-diagonal; positive definiteness requires
    -1/(d-1) < rho < 1.
    """

    mu0: np.ndarray
    sigma0: np.ndarray
    y: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu0", np.atleast_1d(np.asarray(self.mu0, dtype=float)))
        object.__setattr__(self, "sigma0", np.atleast_2d(np.asarray(self.sigma0, dtype=float)))
        object.__setattr__(self, "y", np.atleast_1d(np.asarray(self.y, dtype=float)))
        object.__setattr__(self, "R", np.atleast_2d(np.asarray(self.R, dtype=float)))
        cholesky(self.R)
        cholesky(self.sigma0)

    @staticmethod
    def equicorrelated(dim, xi, rho, mu0=None, sigma0=None):
        """The paper-style configuration: y = (xi,...,xi), unit-diagonal R."""
        mu0 = np.zeros(dim) if mu0 is None else mu0
        sigma0 = np.eye(dim) if sigma0 is None else sigma0
        R = (1.0 - rho) * np.eye(dim) + rho * np.ones((dim, dim))
        return LqgModel(mu0, sigma0, np.full(dim, float(xi)), R)

    @property
    def dim(self):
        return self.mu0.shape[0]

    @cached_property
    def r_inv(self):
        return np.linalg.inv(self.R)

    @cached_property
    def sigma0_inv(self):
        return np.linalg.inv(self.sigma0)

    def loglik(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        diff = np.atleast_2d(x) - self.y
        out = -0.5 * ((diff @ self.r_inv) * diff).sum(axis=1)
        return float(out[0]) if single else out

    def grad_loglik(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        diff = self.y - np.atleast_2d(x)
        out = diff @ self.r_inv
        return out[0] if single else out

    def intermediate(self, lam):
        """Exact conjugate Gaussian pi_lambda on the geometric path."""
        if not 0.0 <= lam <= 1.0:
            raise OutOfRange(f"lambda={lam} outside [0,1]")
        prec = self.sigma0_inv + lam * self.r_inv
        cov = np.linalg.inv(prec)
        mean = cov @ (self.sigma0_inv @ self.mu0 + lam * self.r_inv @ self.y)
        return Gaussian(mean, cov)

    def log_normconst(self, lam):
        """Exact log Z_lambda = log int pi_0(x) exp(lam * l(x)) dx.

        Gaussian convolution identity: exp(lam*l) is an unnormalized
        N(y; x, R/lam) likelihood, so Z_lam =
        (2 pi)^{d/2} det(R/lam)^{1/2} N(y; mu0, Sigma0 + R/lam).
        """
        if not 0.0 <= lam <= 1.0:
            raise OutOfRange(f"lambda={lam} outside [0,1]")
        if lam == 0.0:
            return 0.0
        d = self.dim
        scaled = self.R / lam
        marginal = Gaussian(self.mu0, self.sigma0 + scaled)
        sign, logdet = np.linalg.slogdet(scaled)
        return 0.5 * d * LOG_2PI + 0.5 * logdet + marginal.logpdf(self.y)

    def path(self, schedule: Schedule) -> AnnealingPath:
        base = GaussianBase(Gaussian(self.mu0, self.sigma0))
        cache = {}

        def fast_grad(t, pts):
            # conjugate identity: grad log gamma_t(x) = (mu_t - x) Sigma_t^{-1}
            if t not in cache:
                marg = self.intermediate(schedule.value(t))
                prec = np.linalg.inv(marg.cov)
                cache[t] = (prec, marg.mean @ prec)
            prec, mean_prec = cache[t]
            return mean_prec - pts @ prec

        return AnnealingPath(base, self.loglik, self.grad_loglik, schedule, fast_grad=fast_grad)

    def posterior(self):
        return self.intermediate(1.0)


def lqg_intermediate(model: LqgModel, lam):
    return model.intermediate(lam)


def lqg_log_normconst(model: LqgModel, lam):
    return model.log_normconst(lam)


def log1p_exp(a):
    """log(1 + exp(a)) = max(a, 0) + log1p(exp(-|a|)), overflow-safe."""
    a = np.asarray(a, dtype=float)
    return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))


@dataclass(frozen=True)
class LogisticModel:
    """Bayesian logistic regression with independent Student-t priors."""

    X: np.ndarray
    y: np.ndarray
    prior_scale: float = 2.5
    prior_df: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "X", np.atleast_2d(np.asarray(self.X, dtype=float)))
        object.__setattr__(self, "y", np.atleast_1d(np.asarray(self.y, dtype=float)))
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError("design/response length mismatch")

    @property
    def n_obs(self):
        return self.X.shape[0]

    @property
    def dim(self):
        return self.X.shape[1]

    @cached_property
    def _xty(self):
        return self.X.T @ self.y

    def loglik(self, beta):
        """l(beta) = y'X beta - sum_m log(1 + exp(beta'X_m))."""
        beta = np.asarray(beta, dtype=float)
        single = beta.ndim == 1
        pts = np.atleast_2d(beta)
        logits = pts @ self.X.T  # (n, M)
        out = logits @ self.y - log1p_exp(logits).sum(axis=1)
        return float(out[0]) if single else out

    def grad_loglik(self, beta):
        beta = np.asarray(beta, dtype=float)
        single = beta.ndim == 1
        pts = np.atleast_2d(beta)
        logits = pts @ self.X.T
        probs = 1.0 / (1.0 + np.exp(-logits))
        out = self._xty - probs @ self.X
        return out[0] if single else out

    def prior(self):
        return StudentTBase(self.dim, df=self.prior_df, scale=self.prior_scale)

    def prior_logpdf(self, beta):
        return self.prior().logpdf(beta)

    def prior_grad(self, beta):
        return self.prior().grad_logpdf(beta)

    def path(self, schedule: Schedule) -> AnnealingPath:
        return AnnealingPath(self.prior(), self.loglik, self.grad_loglik, schedule)


def logistic_loglik(model: LogisticModel, beta):
    return model.loglik(beta)


def logistic_grad(model: LogisticModel, beta):
    return model.grad_loglik(beta)


def t_prior_logpdf(model: LogisticModel, beta):
    return model.prior_logpdf(beta)


def t_prior_grad(model: LogisticModel, beta):
    return model.prior_grad(beta)
