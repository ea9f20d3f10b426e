"""Approximate iterative proportional fitting with regression-based policy
refinement: trajectory propagation through twisted kernels, terminal
Radon-Nikodym estimation (single-term or conditional-SMC), the backward
least-squares sweep, and early stopping by parameter-stationarity tests.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special, stats

from .errors import DegenerateWeights, HessianNotUsable, SingularDesign, TwistNotIntegrable
from .kernels import (
    BackwardKernel,
    EulerKernel,
    brownian_kernel,
    clamp_policy_for_twist,
    em_kernel,
    exact_twist,
    quadratic_gaussian_integral,
    taylor_log_normalizer,
    taylor_twist_logpdf,
    taylor_twist_mean_cov,
    taylor_twist_sample,
)
from .linalg import LOG_2PI, log_sum_exp
from .policy import PolicySequence, QuadraticPolicy, fit_quadratic


@dataclass(frozen=True)
class EarlyStopConfig:
    window_cap: int = 15
    min_iters: int = 3
    level: float = 0.05
    bh_correction: bool = True


@dataclass(frozen=True)
class IpfConfig:
    i_max: int
    csmc_m: int = 0
    csmc_p: int = 128
    twist_mode: str = "exact"  # exact | taylor1 | taylor2
    diagonal: bool = False
    ridge: float | None = None
    early_stop: EarlyStopConfig | None = None

    def __post_init__(self):
        if self.i_max < 0:
            raise ValueError("i_max must be >= 0")
        if self.csmc_m >= 1 and self.csmc_p < 2:
            raise ValueError("csmc_p must be >= 2 when csmc_m >= 1")
        if self.twist_mode not in ("exact", "taylor1", "taylor2"):
            raise ValueError(f"unknown twist mode {self.twist_mode!r}")


class ReferenceProcess:
    """Untwisted forward chain on an annealing path, plus its reversals.

    kind='langevin' uses the Euler-Maruyama kernels with drift
    (h/2) grad log pi_t; kind='brownian' is the driftless special case with
    noise sigma^2 h. ``affine`` optionally carries the exact affine-Gaussian
    form of the forward kernels (available for conjugate targets), which
    enables exact twisting.
    """

    def __init__(self, path, h, kind="langevin", sigma=1.0, affine=None):
        if kind not in ("langevin", "brownian"):
            raise ValueError(f"unknown reference kind {kind!r}")
        self.path = path
        self.h = float(h)
        self.kind = kind
        self.sigma = float(sigma)
        self.affine = affine

    @property
    def dim(self):
        return self.path.dim

    @property
    def T(self):
        return self.path.T

    @property
    def noise_var(self):
        return self.h if self.kind == "langevin" else self.sigma**2 * self.h

    def euler(self, t) -> EulerKernel:
        if self.kind == "langevin":
            return em_kernel(self.path, t, self.h)
        return brownian_kernel(self.dim, self.h, self.sigma)

    def gaussian(self, t):
        if self.affine is None:
            raise ValueError("exact twisting needs affine-Gaussian reference kernels")
        return self.affine[t - 1]

    def backward(self, t, policy=None) -> BackwardKernel:
        return BackwardKernel(self.path, t, self.noise_var, policy)


class TwistedChain:
    """Forward and backward kernels over a segment under a policy sequence.

    In taylor2 mode the effective order is resolved per time step: if the
    second-order precision is not usable the step falls back to order 1, and
    the same order is used consistently for sampling, densities and
    normalizers.
    """

    def __init__(self, ref: ReferenceProcess, policies: PolicySequence, mode):
        self.ref = ref
        self.policies = policies
        self.mode = mode
        self._steps = {}
        self._backward = {}

    def _step(self, t):
        if t in self._steps:
            return self._steps[t]
        pol = self.policies[t]
        if self.mode == "exact":
            base = self.ref.gaussian(t)
            if pol.is_identity():
                kern = base
            else:
                try:
                    kern = exact_twist(base, pol, with_normalizer=False).kernel
                except TwistNotIntegrable:
                    # shrink A toward integrability and keep the run moving
                    eps = 1e-6 / float(np.max(np.diag(base.H)))
                    pol = clamp_policy_for_twist(pol, base.h_inv, eps)
                    self.policies[t] = pol
                    kern = exact_twist(base, pol, with_normalizer=False).kernel
            entry = ("gauss", kern, pol)
        else:
            ek = self.ref.euler(t)
            order = 2 if self.mode == "taylor2" else 1
            if order == 2 and not pol.is_identity():
                try:
                    taylor_twist_mean_cov(ek, pol, 2, np.zeros((1, self.ref.dim)))
                except HessianNotUsable:
                    order = 1
            entry = ("taylor", ek, pol, order)
        self._steps[t] = entry
        return entry

    def forward_sample(self, t, x_prev, rng):
        entry = self._step(t)
        if entry[0] == "gauss":
            return entry[1].sample(x_prev, rng)
        _, ek, pol, order = entry
        if pol.is_identity():
            return ek.sample(x_prev, rng)
        return taylor_twist_sample(ek, pol, order, x_prev, rng)

    def forward_logpdf(self, t, x_prev, x):
        entry = self._step(t)
        if entry[0] == "gauss":
            return entry[1].logpdf(x_prev, x)
        _, ek, pol, order = entry
        if pol.is_identity():
            return ek.logpdf(x_prev, x)
        return taylor_twist_logpdf(ek, pol, order, x_prev, x)

    def backward_kernel(self, t) -> BackwardKernel:
        if t not in self._backward:
            self._backward[t] = self.ref.backward(t, self.policies[t])
        return self._backward[t]

    def backward_logpdf(self, t, x_t, x_prev):
        """L_{t-1}^psi(x_t, x_prev) with the wrapper layers flattened."""
        path = self.ref.path
        c = self.ref.noise_var
        mu = x_t + 0.5 * c * path.grad_log_gamma_t(t - 1, x_t)
        pol = self.policies[t]
        if not pol.is_identity():
            mu -= c * pol.grad_log(x_t)
        diff = x_prev - mu
        return -0.5 * (
            self.ref.dim * (LOG_2PI + np.log(c)) + (diff * diff).sum(axis=1) / c
        )

    def adp_target(self, t_next, phi: QuadraticPolicy, x):
        """log M_{t_next}^psi(phi)(x) for the current twisted kernel."""
        entry = self._step(t_next)
        if entry[0] == "gauss":
            kern = entry[1]
            eps = 1e-6 / float(np.max(np.diag(kern.H)))
            phi_ok = clamp_policy_for_twist(phi, kern.h_inv, eps)
            return exact_twist(kern, phi_ok).log_normalizer.log_value(x)
        _, ek, pol, order = entry
        if order == 1:
            if pol.is_identity():
                ek_twisted = ek
            else:
                base_drift = ek.drift

                def twisted_drift(pts, _base=base_drift, _pol=pol, _c=ek.c):
                    return _base(pts) + _c * _pol.grad_log(pts)

                ek_twisted = EulerKernel(twisted_drift, ek.c, ek.dim)
            return taylor_log_normalizer(ek_twisted, phi, 1, x)
        means, cov = taylor_twist_mean_cov(ek, pol, 2, x)
        if cov is None:
            cov = ek.c * np.eye(ek.dim)
        cov_inv = np.linalg.inv(cov)
        phi_ok = clamp_policy_for_twist(phi, cov_inv, 1e-6 / float(np.max(np.diag(cov))))
        return quadratic_gaussian_integral(means, cov, phi_ok)


@dataclass
class SegmentTrajectory:
    """One pass of N trajectories through a twisted segment."""

    ta: int
    tb: int
    states: list  # X_t arrays, index 0 is the ensemble at ta
    log_m: np.ndarray  # (steps, N) forward twisted log-densities
    log_l: np.ndarray  # (steps, N) backward log-densities
    log_gamma: np.ndarray  # (steps+1, N) annealed log-targets along the path
    incremental: np.ndarray  # (steps, N) incremental log-weights

    def rn_single_term(self):
        """M = 0 estimator: the summed incremental log-weights (Eq. 5 telescoped)."""
        return self.incremental.sum(axis=0)


def propagate_segment(chain: TwistedChain, ta, tb, x0, rng, path,
                      log_gamma_start=None) -> SegmentTrajectory:
    n = x0.shape[0]
    steps = tb - ta
    states = [np.asarray(x0, dtype=float)]
    log_m = np.empty((steps, n))
    log_l = np.empty((steps, n))
    log_gamma = np.empty((steps + 1, n))
    log_gamma[0] = path.log_gamma_t(ta, states[0]) if log_gamma_start is None else log_gamma_start
    for j, t in enumerate(range(ta + 1, tb + 1)):
        x_prev = states[-1]
        x = chain.forward_sample(t, x_prev, rng)
        log_m[j] = chain.forward_logpdf(t, x_prev, x)
        log_l[j] = chain.backward_logpdf(t, x, x_prev)
        log_gamma[j + 1] = path.log_gamma_t(t, x)
        states.append(x)
    incremental = log_gamma[1:] - log_gamma[:-1] + log_l - log_m
    return SegmentTrajectory(ta, tb, states, log_m, log_l, log_gamma, incremental)


def trajectory_from_states(chain: TwistedChain, ta, tb, states) -> SegmentTrajectory:
    """Assemble a SegmentTrajectory (densities, weights) from given states."""
    path = chain.ref.path
    n = states[0].shape[0]
    steps = tb - ta
    log_m = np.empty((steps, n))
    log_l = np.empty((steps, n))
    log_gamma = np.empty((steps + 1, n))
    log_gamma[0] = path.log_gamma_t(ta, states[0])
    for j, t in enumerate(range(ta + 1, tb + 1)):
        log_m[j] = chain.forward_logpdf(t, states[j], states[j + 1])
        log_l[j] = chain.backward_kernel(t).logpdf(states[j + 1], states[j])
        log_gamma[j + 1] = path.log_gamma_t(t, states[j + 1])
    incremental = log_gamma[1:] - log_gamma[:-1] + log_l - log_m
    return SegmentTrajectory(ta, tb, list(states), log_m, log_l, log_gamma, incremental)


def rn_estimate_csmc(chain: TwistedChain, traj: SegmentTrajectory, rng, p_particles, m_iters,
                     backward_kernels=None, return_state=False):
    """Alg.-2 conditional-SMC estimator of log d(gamma_tb)/d(q_tb^psi) at each X_tb^n.

    Without resampling: at each iteration, P-1 fresh trajectories are drawn
    from the backward kernels, the current state is kept as the P-th
    candidate, one is selected by the dQ^psi/dH categorical weights, and the
    estimator averages dH/dQ^psi over the (M+1) retained states in log-scale.
    The unnormalized gamma is used throughout; the induced constant offset
    only shifts the fitted intercept. ``backward_kernels`` overrides the
    default approximate reversals (exact conditionals make the estimator
    degenerate at the true value).
    """
    ta, tb = traj.ta, traj.tb
    path = chain.ref.path
    n = traj.states[0].shape[0]
    steps = tb - ta

    backward = backward_kernels or {t: chain.backward_kernel(t) for t in range(ta + 1, tb + 1)}

    if backward_kernels is None:
        first = traj.rn_single_term()
    else:
        log_l0 = np.zeros(n)
        for j, t in enumerate(range(ta + 1, tb + 1)):
            log_l0 += backward[t].logpdf(traj.states[j + 1], traj.states[j])
        first = traj.log_gamma[-1] - traj.log_gamma[0] + log_l0 - traj.log_m.sum(axis=0)

    # log dH/dQ^psi for the initial (conditioned) trajectory.
    acc = [first]
    cur_states = [traj.states[j] for j in range(steps)]  # prefix X_{ta:tb-1}
    if m_iters == 0:
        if return_state:
            return acc[0], cur_states
        return acc[0]

    cur_log_ratio = -acc[0]  # log dQ^psi/dH of the current state
    x_end = traj.states[-1]

    dim = traj.states[0].shape[1]
    fused = backward_kernels is None  # default reversals have covariance c I
    log_norm_bwd = -0.5 * dim * (np.log(2.0 * np.pi) + np.log(chain.ref.noise_var))
    sd_bwd = np.sqrt(chain.ref.noise_var)
    p_new = p_particles - 1
    x_end_rep = np.repeat(x_end, p_new, axis=0)  # (n*p_new, d)
    for _ in range(m_iters):
        # Backward candidates: arrays (steps, n, p_new, d), sampled from L.
        # The proposal mean is computed once and reused for the density.
        cand = [None] * steps
        log_l_cand = np.zeros((n, p_new))
        prev = x_end_rep
        for j in range(steps - 1, -1, -1):
            t = ta + 1 + j
            kern = backward[t]
            if fused:
                mu = kern.mean(prev)
                noise = rng.standard_normal(mu.shape)
                drawn = mu + sd_bwd * noise
                log_l_cand += (
                    log_norm_bwd - 0.5 * (noise * noise).sum(axis=1)
                ).reshape(n, p_new)
            else:
                drawn = kern.sample(prev, rng)
                log_l_cand += kern.logpdf(prev, drawn).reshape(n, p_new)
            cand[j] = drawn
            prev = drawn
        log_fwd = np.zeros((n, p_new))
        log_gam0 = path.log_gamma_t(ta, cand[0]).reshape(n, p_new)
        for j in range(steps):
            t = ta + 1 + j
            nxt = cand[j + 1] if j + 1 < steps else x_end_rep
            log_fwd += chain.forward_logpdf(t, cand[j], nxt).reshape(n, p_new)
        log_gam_end = traj.log_gamma[-1][:, None]
        log_ratio_cand = (log_gam0 + log_fwd) - (log_gam_end + log_l_cand)

        all_ratios = np.concatenate([log_ratio_cand, cur_log_ratio[:, None]], axis=1)
        if np.any(np.all(np.isneginf(all_ratios), axis=1)):
            raise DegenerateWeights("all CSMC candidate ratios underflowed")
        norm = log_sum_exp(all_ratios, axis=1)
        probs = np.exp(all_ratios - norm[:, None])
        probs /= probs.sum(axis=1, keepdims=True)
        u = rng.uniform(size=n)
        choice = (probs.cumsum(axis=1) < u[:, None]).sum(axis=1)
        choice = np.minimum(choice, p_particles - 1)

        keep = choice == p_new
        fresh = ~keep
        if np.any(fresh):
            idx = np.where(fresh)[0]
            flat = idx * p_new + choice[idx]
            for j in range(steps):
                arr = cur_states[j].copy()
                arr[idx] = cand[j][flat]
                cur_states[j] = arr
            cur_log_ratio = cur_log_ratio.copy()
            cur_log_ratio[idx] = log_ratio_cand[idx, choice[idx]]
        acc.append(-cur_log_ratio)

    stacked = np.stack(acc, axis=0)
    estimates = log_sum_exp(stacked, axis=0) - np.log(m_iters + 1)
    if return_state:
        return estimates, cur_states
    return estimates


def adp_sweep(chain: TwistedChain, traj: SegmentTrajectory, log_phi_end, diagonal, ridge=None):
    """Backward least-squares recursion for the policy increments.

    Fits phi at the terminal time to the Radon-Nikodym targets, then for
    each earlier time fits the log-normalizer of the next fitted increment.
    Non-finite targets are dropped from the regression (with a counter kept
    in the returned diagnostics).
    """
    ta, tb = traj.ta, traj.tb
    increments = {}
    dropped = 0
    targets = np.asarray(log_phi_end, dtype=float)
    for t in range(tb, ta, -1):
        x = traj.states[t - ta]
        mask = np.isfinite(targets)
        dropped += int(targets.size - mask.sum())
        if mask.sum() < targets.size:
            x_fit, y_fit = x[mask], targets[mask]
        else:
            x_fit, y_fit = x, targets
        increments[t] = fit_quadratic(x_fit, y_fit, diagonal=diagonal, ridge=ridge)
        if t - 1 > ta:
            targets = chain.adp_target(t, increments[t], traj.states[t - 1 - ta])
    return increments, dropped


def early_stop_check(history, window_cap=15, level=0.05, use_bh=True, min_iters=3):
    """Parameter-stationarity test on successive differences.

    history holds the flattened policy parameters at iterations 0..i. For
    each parameter a one-sample t-test is run on the last J = min(cap, i)
    differences against mean zero; the iteration stops when no test is
    significant (after Benjamini-Hochberg correction when enabled), and the
    parameters are averaged over the window. Zero-variance differences count
    as not significant: a constant history is by definition stationary.
    """
    hist = np.asarray(history, dtype=float)
    i = hist.shape[0] - 1
    if i < min_iters:
        return False, None
    j = min(window_cap, i)
    diffs = hist[i - j + 1 : i + 1] - hist[i - j : i]
    means = diffs.mean(axis=0)
    sds = diffs.std(axis=0, ddof=1) if j > 1 else np.zeros_like(means)
    pvals = np.ones_like(means)
    live = sds > 0.0
    if np.any(live):
        tstat = means[live] / (sds[live] / np.sqrt(j))
        pvals[live] = 2.0 * special.stdtr(j - 1, -np.abs(tstat))
    if use_bh:
        order = np.sort(pvals)
        m = order.shape[0]
        thresholds = level * np.arange(1, m + 1) / m
        significant = bool(np.any(order <= thresholds))
    else:
        significant = bool(np.any(pvals <= level))
    if significant:
        return False, None
    return True, hist[i - j : i + 1].mean(axis=0)


def _clamp_sequence(policies: PolicySequence, ref: ReferenceProcess, mode):
    """Keep every per-time twist integrable for the given mode."""
    for t in range(policies.t0 + 1, policies.t1 + 1):
        pol = policies[t]
        if pol.is_identity():
            continue
        if mode == "exact":
            kern = ref.gaussian(t)
            eps = 1e-6 / float(np.max(np.diag(kern.H)))
            policies[t] = clamp_policy_for_twist(pol, kern.h_inv, eps)
        elif mode == "taylor2":
            # fall back handled per-step; nothing to clamp for sampling
            pass
    return policies


@dataclass
class IpfDiagnostics:
    iterations: int = 0
    dropped_targets: int = 0
    records: list = field(default_factory=list)  # per-iteration dicts
    stopped_early: bool = False

    def as_rows(self):
        return list(self.records)


def approximate_ipf(
    ref: ReferenceProcess,
    ta,
    tb,
    init,
    cfg: IpfConfig,
    rng,
    init_policies: PolicySequence | None = None,
    rn_hook=None,
    stop_fn=None,
    on_iteration=None,
    record_iterations=False,
):
    """Run approximate IPF on the segment [ta:tb].

    ``init`` is either a fixed (N, d) ensemble approximately distributed as
    pi_ta or a callable rng -> ensemble evaluated once per iteration (fresh
    draws, or rejuvenated particles). ``rn_hook(policies, traj)`` substitutes
    the terminal Radon-Nikodym estimates (test oracle / N^2 filter variant).
    ``stop_fn(traj)`` is an alternative stopping rule evaluated on each
    iteration's trajectories (adaptive-ESS recovery).
    """
    path = ref.path
    policies = (
        init_policies.copy()
        if init_policies is not None
        else PolicySequence(ta, tb, ref.dim, cfg.diagonal)
    )
    diag = IpfDiagnostics()
    history = [policies.monitor_params()]

    fixed_init = None if callable(init) else np.asarray(init, dtype=float)
    log_gamma_start = None if fixed_init is None else path.log_gamma_t(ta, fixed_init)
    for i in range(1, cfg.i_max + 1):
        tic = time.perf_counter() if record_iterations else 0.0
        x0 = init(rng) if callable(init) else fixed_init
        chain = TwistedChain(ref, policies, cfg.twist_mode)
        traj = propagate_segment(chain, ta, tb, x0, rng, path, log_gamma_start=log_gamma_start)
        if rn_hook is not None:
            log_phi = rn_hook(policies, traj)
        elif cfg.csmc_m == 0:
            log_phi = traj.rn_single_term()
        else:
            log_phi = rn_estimate_csmc(chain, traj, rng, cfg.csmc_p, cfg.csmc_m)
        increments, dropped = adp_sweep(chain, traj, log_phi, cfg.diagonal, cfg.ridge)
        diag.dropped_targets += dropped
        policies.refine(increments)
        history.append(policies.monitor_params())
        diag.iterations = i

        if record_iterations:
            seg_logw = log_phi if cfg.csmc_m == 0 and rn_hook is None else traj.incremental.sum(axis=0)
            ess = 0.0
            if np.any(np.isfinite(seg_logw)):
                ess = float(np.exp(2.0 * log_sum_exp(seg_logw) - log_sum_exp(2.0 * seg_logw)))
            diag.records.append(
                {
                    "iteration": i,
                    "ess": ess,
                    "wall_time": time.perf_counter() - tic,
                }
            )
        if on_iteration is not None:
            on_iteration(i, policies, traj)

        if stop_fn is not None:
            if stop_fn(traj) and i >= (cfg.early_stop.min_iters if cfg.early_stop else 1):
                diag.stopped_early = True
                break
        elif cfg.early_stop is not None:
            stop, averaged = early_stop_check(
                history,
                window_cap=cfg.early_stop.window_cap,
                level=cfg.early_stop.level,
                use_bh=cfg.early_stop.bh_correction,
                min_iters=cfg.early_stop.min_iters,
            )
            if stop:
                policies.set_monitor_params(averaged)
                diag.stopped_early = True
                break

    return policies, diag
