"""Sequential Schrodinger bridge sampler, plain SMC-sampler baseline, and
the shared weight/resampling/estimator machinery.

The sampler composes two-marginal bridges between adjacent annealing
targets: per segment it refines a quadratic policy by approximate IPF
(optionally warm-started, rejuvenated and early-stopped), propagates the
ensemble through the twisted kernels, and accumulates path weights.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import AllWeightsDegenerate
from .ipf import IpfConfig, ReferenceProcess, TwistedChain, approximate_ipf, propagate_segment
from .kernels import mala_step
from .linalg import log_sum_exp
from .policy import PolicySequence, identity_policy, warm_start


def ess(log_weights):
    """Effective sample size 1 / sum(W^2) of normalized weights, in [1, N]."""
    lw = np.asarray(log_weights, dtype=float)
    finite = np.isfinite(lw)
    if not np.any(finite):
        raise AllWeightsDegenerate
    return float(np.exp(2.0 * log_sum_exp(lw) - log_sum_exp(2.0 * lw)))


def normalized_weights(log_weights):
    lw = np.asarray(log_weights, dtype=float)
    if not np.any(np.isfinite(lw)):
        raise AllWeightsDegenerate
    w = np.exp(lw - log_sum_exp(lw))
    return w / w.sum()


def systematic_resample(log_weights, rng):
    """Systematic resampling: one uniform, stratified offspring counts.

    Offspring counts are floor/ceil of N * W_n with expectation N * W_n;
    equal weights reproduce every index exactly once.
    """
    w = normalized_weights(log_weights)
    n = w.shape[0]
    positions = (rng.uniform() + np.arange(n)) / n
    cumulative = np.cumsum(w)
    cumulative[-1] = 1.0
    return np.searchsorted(cumulative, positions, side="right").astype(np.intp)


def incremental_log_weight(path, t, fwd_logpdf, bwd_logpdf, x_prev, x_cur):
    """Eq.-(5) incremental weight:
    log gamma_t(x) + log L_{t-1}(x, x') - log gamma_{t-1}(x') - log M_t(x', x)."""
    return (
        path.log_gamma_t(t, x_cur)
        + bwd_logpdf
        - path.log_gamma_t(t - 1, x_prev)
        - fwd_logpdf
    )


@dataclass
class ParticleEnsemble:
    states: np.ndarray  # (N, d) at the final time
    log_weights: np.ndarray  # (N,) accumulated since the last resampling
    log_z_base: float  # constant absorbed at resampling events
    ess_trace: np.ndarray  # (T+1,)
    logz_trace: np.ndarray  # (T+1,)
    ancestry: list = field(default_factory=list)  # (t, indices) per resampling event
    trajectory: np.ndarray | None = None  # (T+1, N, d) when stored
    info: dict = field(default_factory=dict)

    @property
    def n_particles(self):
        return self.states.shape[0]

    def normalized(self):
        return normalized_weights(self.log_weights)


def estimate(ensemble: ParticleEnsemble, test_function):
    """Self-normalized expectation estimate at the final time."""
    w = ensemble.normalized()
    values = np.asarray(test_function(ensemble.states), dtype=float)
    return float(w @ values)


def estimate_logZ(ensemble: ParticleEnsemble):
    lw = ensemble.log_weights
    if not np.any(np.isfinite(lw)):
        raise AllWeightsDegenerate
    return ensemble.log_z_base + log_sum_exp(lw) - np.log(lw.shape[0])


@dataclass(frozen=True)
class AdaptiveSpec:
    """Adaptive bridge construction: trigger a segment when the ESS fraction
    drops below ``trigger``; run IPF until the segment ESS fraction recovers
    to ``recover`` or stalls (< ``stall_tol`` * N improvement over the last
    ``stall_window`` iterations)."""

    trigger: float = 0.5
    recover: float = 0.9
    stall_window: int = 3
    stall_tol: float = 0.01
    i_max: int = 100


@dataclass(frozen=True)
class SsbConfig:
    n_particles: int
    ipf: IpfConfig
    bridge_times: tuple | None = None  # sorted—must include 0 and T; None = every step
    adaptive: AdaptiveSpec | None = None
    resample: str = "none"  # none | always | threshold
    resample_threshold: float = 0.5
    rejuvenate: bool = False
    mala_step_size: float | None = None  # default 3 / d^(1/3)
    mala_variance_floor: float = 1e-8
    warm_start: str = "none"  # none | copy | extrapolate
    store_trajectory: bool = False

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if self.resample not in ("none", "always", "threshold"):
            raise ValueError(f"unknown resample mode {self.resample!r}")
        if self.warm_start not in ("none", "copy", "extrapolate"):
            raise ValueError(f"unknown warm start mode {self.warm_start!r}")


def adaptive_bridge_trigger(log_weights, e_k, n):
    """True when the ESS of the accumulated weights breaches e_k * N."""
    return ess(log_weights) < e_k * n


class _Accumulator:
    """Weight, ESS-trace and normalizing-constant bookkeeping over [0:T].

    log Z_t = log_z_base + LSE(log w) - log N holds under any resampling
    pattern; resampling folds the current mean weight into the base.
    """

    def __init__(self, n, T, store_states=False, dim=None):
        self.logw = np.zeros(n)
        self.log_z_base = 0.0
        self.ess_trace = np.full(T + 1, np.nan)
        self.logz_trace = np.full(T + 1, np.nan)
        self.ess_trace[0] = float(n)
        self.logz_trace[0] = 0.0
        self.ancestry = []
        self.states_log = [] if store_states else None

    def record_initial(self, x):
        if self.states_log is not None:
            self.states_log.append(x.copy())

    def step(self, t, increment, x):
        self.logw = self.logw + increment
        if not np.any(np.isfinite(self.logw)):
            raise AllWeightsDegenerate(t=t)
        n = self.logw.shape[0]
        self.ess_trace[t] = ess(self.logw)
        self.logz_trace[t] = self.log_z_base + log_sum_exp(self.logw) - np.log(n)
        if self.states_log is not None:
            self.states_log.append(x.copy())

    def maybe_resample(self, t, x, rng, mode, threshold):
        n = self.logw.shape[0]
        if mode == "none":
            return x
        if mode == "threshold" and ess(self.logw) >= threshold * n:
            return x
        idx = systematic_resample(self.logw, rng)
        self.log_z_base += log_sum_exp(self.logw) - np.log(n)
        self.logw = np.zeros(n)
        self.ancestry.append((t, idx))
        if self.states_log is not None:
            self.states_log = [s[idx] for s in self.states_log]
        return x[idx]

    def finish(self, x, info):
        traj = np.stack(self.states_log) if self.states_log is not None else None
        return ParticleEnsemble(
            states=x,
            log_weights=self.logw,
            log_z_base=self.log_z_base,
            ess_trace=self.ess_trace,
            logz_trace=self.logz_trace,
            ancestry=self.ancestry,
            trajectory=traj,
            info=info,
        )


def _final_pass(ref, policies, ta, tb, x, acc, rng, cfg):
    """Propagate the ensemble through the converged twisted kernels, pushing
    incremental weights (and optional resampling) into the accumulator."""
    chain = TwistedChain(ref, policies, cfg.ipf.twist_mode)
    path = ref.path
    log_gamma_prev = path.log_gamma_t(ta, x)
    for t in range(ta + 1, tb + 1):
        x_new = chain.forward_sample(t, x, rng)
        log_m = chain.forward_logpdf(t, x, x_new)
        log_l = chain.backward_kernel(t).logpdf(x_new, x)
        log_gamma_cur = path.log_gamma_t(t, x_new)
        inc = log_gamma_cur + log_l - log_gamma_prev - log_m
        acc.step(t, inc, x_new)
        x = acc.maybe_resample(t, x_new, rng, cfg.resample, cfg.resample_threshold)
        log_gamma_prev = log_gamma_cur if x is x_new else path.log_gamma_t(t, x)
    return x


def _make_rejuvenator(path, ta, cfg, holder):
    step = cfg.mala_step_size
    if step is None:
        step = 3.0 / path.dim ** (1.0 / 3.0)

    def init_fn(rng):
        x = holder[0]
        scale = np.maximum(x.var(axis=0), cfg.mala_variance_floor)
        x = mala_step(
            lambda pts: path.log_gamma_t(ta, pts),
            lambda pts: path.grad_log_gamma_t(ta, pts),
            x,
            step,
            scale,
            rng,
        )
        holder[0] = x
        return x

    return init_fn


def _warm_policies(cfg, ta, tb, dim, prev, prev2):
    if cfg.warm_start == "none" or prev is None:
        return None
    seq = PolicySequence(ta, tb, dim, cfg.ipf.diagonal)
    span_prev = prev.t1 - prev.t0
    for t in range(ta + 1, tb + 1):
        offset = t - ta
        src = prev[min(prev.t0 + offset, prev.t1)] if span_prev >= 1 else None
        if src is None:
            continue
        if cfg.warm_start == "extrapolate" and prev2 is not None and (prev2.t1 - prev2.t0) >= 1:
            src2 = prev2[min(prev2.t0 + offset, prev2.t1)]
            seq[t] = warm_start(src, src2)
        else:
            seq[t] = src
    return seq


def ssb_sampler(ref: ReferenceProcess, cfg: SsbConfig, rng):
    """Run the sequential Schrodinger bridge sampler over [0:T].

    Returns (ensemble, per-segment policies, diagnostics). The normalizing
    constant estimate from the adaptive run is not unbiased (the policies
    were tuned on the same particles); rerun ``smc_sampler`` with the frozen
    policies for an unbiased estimate.
    """
    if cfg.adaptive is not None:
        return _ssb_adaptive(ref, cfg, rng)
    path = ref.path
    T = ref.T
    times = list(cfg.bridge_times) if cfg.bridge_times is not None else list(range(T + 1))
    if times[0] != 0 or times[-1] != T or sorted(times) != times:
        raise ValueError("bridge_times must be sorted and contain 0 and T")

    x = path.sample_base(rng, cfg.n_particles)
    acc = _Accumulator(cfg.n_particles, T, cfg.store_trajectory, ref.dim)
    acc.record_initial(x)
    segments = []
    prev_pol = prev_pol2 = None
    per_segment = []

    for ta, tb in zip(times[:-1], times[1:]):
        tic = time.perf_counter()
        holder = [x]
        init = _make_rejuvenator(path, ta, cfg, holder) if cfg.rejuvenate else x
        warm = _warm_policies(cfg, ta, tb, ref.dim, prev_pol, prev_pol2)
        policies, diag = approximate_ipf(
            ref, ta, tb, init, cfg.ipf, rng, init_policies=warm
        )
        x = holder[0]
        x = _final_pass(ref, policies, ta, tb, x, acc, rng, cfg)
        per_segment.append(
            {
                "ta": ta,
                "tb": tb,
                "ipf_iterations": diag.iterations,
                "stopped_early": diag.stopped_early,
                "wall_time": time.perf_counter() - tic,
                "dropped_targets": diag.dropped_targets,
            }
        )
        segments.append(policies)
        prev_pol2, prev_pol = prev_pol, policies

    info = {"segments": per_segment, "zhat_biased_by_adaptation": any(
        s["ipf_iterations"] > 0 for s in per_segment
    )}
    ensemble = acc.finish(x, info)
    return ensemble, segments, per_segment


def _ssb_adaptive(ref: ReferenceProcess, cfg: SsbConfig, rng):
    """ESS-triggered construction of the bridge set (no resampling inside
    segments; optional resampling at segment closes)."""
    path = ref.path
    T = ref.T
    spec = cfg.adaptive
    n = cfg.n_particles
    x = path.sample_base(rng, n)
    acc = _Accumulator(n, T, cfg.store_trajectory, ref.dim)
    acc.record_initial(x)
    identity_seq_cache = {}
    per_segment = []
    segments = []
    t_cur = 0
    prev_pol = prev_pol2 = None

    while t_cur < T:
        # probe forward with untwisted kernels until the ESS trigger fires
        probe_x = x
        probe_logw = np.zeros(n)
        breach = None
        probe_rng = np.random.default_rng(rng.integers(0, 2**63 - 1))
        probe_states = []
        for t in range(t_cur + 1, T + 1):
            seq = identity_seq_cache.setdefault(
                (t - 1, t), PolicySequence(t - 1, t, ref.dim, cfg.ipf.diagonal)
            )
            chain = TwistedChain(ref, seq, cfg.ipf.twist_mode)
            traj = propagate_segment(chain, t - 1, t, probe_x, probe_rng, path)
            probe_x = traj.states[-1]
            probe_logw = probe_logw + traj.incremental[0]
            probe_states.append((t, traj.incremental[0], probe_x))
            if adaptive_bridge_trigger(acc.logw + probe_logw, spec.trigger, n):
                breach = t
                break
        tb = breach if breach is not None else T
        tic = time.perf_counter()
        if breach is None:
            # accept the probe: no further bridging needed
            for t, inc, xt in probe_states:
                acc.step(t, inc, xt)
            x = probe_x
            per_segment.append({"ta": t_cur, "tb": T, "ipf_iterations": 0,
                                "stopped_early": False,
                                "wall_time": time.perf_counter() - tic,
                                "dropped_targets": 0})
            t_cur = T
            break

        ess_history = []

        def recovery_stop(traj):
            seg_logw = traj.incremental.sum(axis=0)
            cur = ess(seg_logw)
            ess_history.append(cur)
            if cur >= spec.recover * n:
                return True
            if len(ess_history) > spec.stall_window:
                gain = cur - ess_history[-1 - spec.stall_window]
                if gain < spec.stall_tol * n:
                    return True
            return False

        ipf_cfg = replace(cfg.ipf, i_max=spec.i_max)
        holder = [x]
        init = _make_rejuvenator(path, t_cur, cfg, holder) if cfg.rejuvenate else x
        warm = _warm_policies(cfg, t_cur, tb, ref.dim, prev_pol, prev_pol2)
        policies, diag = approximate_ipf(
            ref, t_cur, tb, init, ipf_cfg, rng, init_policies=warm, stop_fn=recovery_stop
        )
        x = holder[0]
        x = _final_pass(ref, policies, t_cur, tb, x, acc, rng, cfg)
        per_segment.append({"ta": t_cur, "tb": tb, "ipf_iterations": diag.iterations,
                            "stopped_early": diag.stopped_early,
                            "wall_time": time.perf_counter() - tic,
                            "dropped_targets": diag.dropped_targets})
        segments.append(policies)
        prev_pol2, prev_pol = prev_pol, policies
        t_cur = tb

    info = {"segments": per_segment, "zhat_biased_by_adaptation": True}
    ensemble = acc.finish(x, info)
    return ensemble, segments, per_segment


def smc_sampler(ref: ReferenceProcess, n_particles, rng, resample="none",
                resample_threshold=0.5, store_trajectory=False,
                policies_by_segment=None, twist_mode=None):
    """Plain SMC sampler with the reference (or frozen twisted) kernels.

    With ``policies_by_segment`` (list of PolicySequence covering [0:T]) the
    run uses those fixed policies, which yields the unbiased second-pass
    estimator for an SSB-learned bridge.
    """
    path = ref.path
    T = ref.T
    x = path.sample_base(rng, n_particles)
    acc = _Accumulator(n_particles, T, store_trajectory, ref.dim)
    acc.record_initial(x)
    cfg = SsbConfig(
        n_particles=n_particles,
        ipf=IpfConfig(i_max=0, twist_mode=twist_mode or "taylor1"),
        resample=resample,
        resample_threshold=resample_threshold,
        store_trajectory=store_trajectory,
    )
    if policies_by_segment is None:
        seq = PolicySequence(0, T, ref.dim)
        x = _final_pass(ref, seq, 0, T, x, acc, rng, cfg)
    else:
        for seq in policies_by_segment:
            x = _final_pass(ref, seq, seq.t0, seq.t1, x, acc, rng, cfg)
    return acc.finish(x, {"segments": [], "zhat_biased_by_adaptation": False})
