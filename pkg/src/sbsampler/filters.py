"""State-space filtering comparison suite: exact Kalman oracle, bootstrap
particle filter, and the bridge-based particle filter that learns a twisted
proposal per step from pairwise transition-density ratios.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import AllWeightsDegenerate
from .ipf import EarlyStopConfig, early_stop_check
from .kernels import GaussianKernel, clamp_policy_for_twist, exact_twist
from .linalg import LOG_2PI, Gaussian, log_sum_exp, symmetrize
from .policy import QuadraticPolicy, fit_quadratic, identity_policy
from .ssb import ess, systematic_resample


@dataclass(frozen=True)
class LinearSsm:
    """Discretized linear-Gaussian state-space model.

    Transitions f_t(x, .) = N(x + h A x, h I); observations
    g_t(x, .) = N(x, sigma_obs^2 I); initial N(0, I). The drift matrix has
    entries A_ij = alpha^{|i-j|+1}.
    """

    dim: int
    alpha: float
    h: float
    T: int
    sigma_obs: float

    def __post_init__(self):
        if self.h <= 0 or self.sigma_obs <= 0:
            raise ValueError("h and sigma_obs must be positive")

    @property
    def drift_matrix(self):
        idx = np.arange(self.dim)
        return self.alpha ** (np.abs(idx[:, None] - idx[None, :]) + 1.0)

    @property
    def transition(self) -> GaussianKernel:
        return GaussianKernel(
            np.eye(self.dim) + self.h * self.drift_matrix,
            np.zeros(self.dim),
            self.h * np.eye(self.dim),
        )

    def initial(self) -> Gaussian:
        return Gaussian(np.zeros(self.dim), np.eye(self.dim))

    def log_obs(self, x, y):
        diff = np.atleast_2d(x) - y
        return -0.5 * (
            self.dim * (LOG_2PI + 2.0 * np.log(self.sigma_obs))
            + np.sum(diff**2, axis=1) / self.sigma_obs**2
        )

    def simulate(self, rng):
        """Draw a latent path and observations y_1..y_T."""
        x = self.initial().sample(rng)
        kern = self.transition
        xs, ys = [x], []
        for _ in range(self.T):
            x = kern.sample(x, rng)
            xs.append(x)
            ys.append(x + self.sigma_obs * rng.standard_normal(self.dim))
        return np.stack(xs), np.stack(ys)


@dataclass
class FilterOutput:
    means: np.ndarray  # (T+1, d) filtering means (moment estimates for PFs)
    covs: np.ndarray  # (T+1, d, d)
    loglik_trace: np.ndarray  # (T,) cumulative log marginal likelihood
    ess_trace: np.ndarray | None = None  # (T,) for particle filters
    info: dict = field(default_factory=dict)

    @property
    def loglik(self):
        return float(self.loglik_trace[-1])


def kalman(model: LinearSsm, ys) -> FilterOutput:
    """Exact filtering recursion with log marginal likelihood accumulation."""
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    d = model.dim
    kern = model.transition
    m = np.zeros(d)
    P = np.eye(d)
    means = [m.copy()]
    covs = [P.copy()]
    loglik = 0.0
    trace = []
    eye = np.eye(d)
    for y in ys:
        m_pred = kern.K @ m
        P_pred = symmetrize(kern.K @ P @ kern.K.T + kern.H)
        S = symmetrize(P_pred + model.sigma_obs**2 * eye)
        loglik += Gaussian(m_pred, S).logpdf(y)
        gain = np.linalg.solve(S, P_pred).T
        m = m_pred + gain @ (y - m_pred)
        P = symmetrize((eye - gain) @ P_pred)
        means.append(m.copy())
        covs.append(P.copy())
        trace.append(loglik)
    return FilterOutput(np.stack(means), np.stack(covs), np.asarray(trace))


def _moments(x, w=None):
    if w is None:
        mean = x.mean(axis=0)
        cov = np.cov(x.T, bias=False)
    else:
        mean = w @ x
        centered = x - mean
        cov = centered.T @ (centered * w[:, None])
    return mean, symmetrize(np.atleast_2d(cov))


def bootstrap_pf(model: LinearSsm, ys, n_particles, rng) -> FilterOutput:
    """Propagate with the transition, weight by the observation density,
    systematic resampling every step; log-likelihood from mean weights."""
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    kern = model.transition
    x = model.initial().sample(rng, n_particles)
    means = [x.mean(axis=0)]
    covs = [_moments(x)[1]]
    loglik = 0.0
    trace, ess_trace = [], []
    for y in ys:
        x = kern.sample(x, rng)
        logw = model.log_obs(x, y)
        if not np.any(np.isfinite(logw)):
            raise AllWeightsDegenerate
        loglik += log_sum_exp(logw) - np.log(n_particles)
        ess_trace.append(ess(logw))
        w = np.exp(logw - log_sum_exp(logw))
        w /= w.sum()
        mean, cov = _moments(x, w)
        means.append(mean)
        covs.append(cov)
        trace.append(loglik)
        if n_particles > 1:
            x = x[systematic_resample(logw, rng)]
    return FilterOutput(
        np.stack(means), np.stack(covs), np.asarray(trace), np.asarray(ess_trace)
    )


def _pairwise_log_density(kernel: GaussianKernel, x_prev, x_cur):
    """(n_cur, n_prev) log densities kernel(x_prev_k -> x_cur_n)."""
    mu = kernel.mean(x_prev)  # (n_prev, d)
    diff = x_cur[:, None, :] - mu[None, :, :]
    hinv = kernel.h_inv
    quad = np.einsum("nkd,de,nke->nk", diff, hinv, diff)
    return -0.5 * (kernel.dim * LOG_2PI + kernel.log_det_h + quad)


def sbpf(model: LinearSsm, ys, n_particles, rng, i_max=20,
         early_stop: EarlyStopConfig | None = None, ridge=None) -> FilterOutput:
    """Bridge particle filter with the N^2 density-ratio estimator.

    Per step, the one-step bridge from the current ensemble to the filtering
    target is refined by IPF: the terminal Radon-Nikodym values are estimated
    by g_t(x, y_t) * sum_k f_t(x_k, x) / sum_k f^psi_t(x_k, x), a quadratic
    increment is fitted and folded into the proposal twist. No backward
    kernels are involved; early stopping reuses the parameter-stationarity
    test.
    """
    if early_stop is None:
        early_stop = EarlyStopConfig()
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    base = model.transition
    eps = 1e-6 / float(np.max(np.diag(base.H)))
    x = model.initial().sample(rng, n_particles)
    means = [x.mean(axis=0)]
    covs = [_moments(x)[1]]
    loglik = 0.0
    trace, ess_trace, iter_trace = [], [], []

    for y in ys:
        policy = identity_policy(model.dim)
        history = [policy.params()]
        for i in range(1, i_max + 1):
            kern = base if policy.is_identity() else exact_twist(base, policy).kernel
            prop = kern.sample(x, rng)
            log_ratio = (
                model.log_obs(prop, y)
                + log_sum_exp(_pairwise_log_density(base, x, prop), axis=1)
                - log_sum_exp(_pairwise_log_density(kern, x, prop), axis=1)
            )
            finite = np.isfinite(log_ratio)
            increment = fit_quadratic(prop[finite], log_ratio[finite], ridge=ridge)
            policy = clamp_policy_for_twist(policy * increment, base.h_inv, eps)
            history.append(policy.params())
            stop, averaged = early_stop_check(
                history,
                window_cap=early_stop.window_cap,
                level=early_stop.level,
                use_bh=early_stop.bh_correction,
                min_iters=early_stop.min_iters,
            )
            if stop:
                policy = clamp_policy_for_twist(
                    QuadraticPolicy.from_params(averaged, model.dim, False),
                    base.h_inv,
                    eps,
                )
                break
        iter_trace.append(i)

        kern = base if policy.is_identity() else exact_twist(base, policy).kernel
        x_new = kern.sample(x, rng)
        logw = (
            model.log_obs(x_new, y)
            + log_sum_exp(_pairwise_log_density(base, x, x_new), axis=1)
            - log_sum_exp(_pairwise_log_density(kern, x, x_new), axis=1)
        )
        if not np.any(np.isfinite(logw)):
            raise AllWeightsDegenerate
        loglik += log_sum_exp(logw) - np.log(n_particles)
        ess_trace.append(ess(logw))
        w = np.exp(logw - log_sum_exp(logw))
        w /= w.sum()
        mean, cov = _moments(x_new, w)
        means.append(mean)
        covs.append(cov)
        trace.append(loglik)
        x = x_new[systematic_resample(logw, rng)] if n_particles > 1 else x_new
    return FilterOutput(
        np.stack(means),
        np.stack(covs),
        np.asarray(trace),
        np.asarray(ess_trace),
        info={"ipf_iterations": iter_trace},
    )


def write_observations_csv(path, ys):
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"y_{i + 1}" for i in range(ys.shape[1])])
        for t, row in enumerate(ys, start=1):
            writer.writerow([t] + [repr(v) for v in row])


def read_observations_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [list(map(float, row[1:])) for row in reader]
    return np.asarray(rows)
