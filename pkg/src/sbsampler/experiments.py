"""Reproducible experiment drivers and their configuration schema.

Every run writes, under the output directory:
  * manifest.json  - resolved config, seed, git description, wall times
  * per_rep.csv    - one row per replication (deterministic numerics only)
  * per_time.csv   - per-time aggregates (nearest-rank median / 5% / 95%)
  * timing.csv     - wall-clock columns, kept out of the deterministic files
  * summary.json   - headline numbers for the experiment

Seed fan-out: the master seed feeds numpy.random.SeedSequence; replication
r uses its r-th spawned child, so results are independent of the worker
count and reproducible per replication. Replications run in parallel across
processes when threads > 1; outputs are collected in replication order.
"""

from __future__ import annotations

import csv
import json
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import SchemaError, UnknownExperiment
from .filters import LinearSsm, bootstrap_pf, kalman, sbpf
from .heart import load_heart_dataset
from .ipf import EarlyStopConfig, IpfConfig, ReferenceProcess, TwistedChain, approximate_ipf, propagate_segment
from .linalg import Gaussian, w2_gaussian
from .lqg import (
    brownian_reference_kernels,
    exact_lqg_ipf,
    langevin_reference_kernels,
    w2_to_fixed_point,
)
from .ssb import AdaptiveSpec, SsbConfig, estimate_logZ, smc_sampler, ssb_sampler
from .targets import LqgModel, Schedule
from .transport import CoupledSample, flow_cost_estimate, lqg_flow_transport, w2_upper_estimate

EXPERIMENT_IDS = (
    "lqg-two-marginal",
    "lqg-ssb",
    "lqg-highdim",
    "ot-brownian",
    "flow-transport",
    "pf-compare",
    "logistic",
)

_MODEL_DEFAULTS = {
    "d": 2,
    "xi": 8.0,
    "rho": 0.8,
    "tau": 2.0,
    "T": 40,
    "schedule": "linear",
    "alpha": 0.1,
    "sigma_obs": 0.1,
    "sigma": 1.0,
    "dataset": None,
}

_SAMPLER_DEFAULTS = {
    "n_particles": 1000,
    "m_csmc": 0,
    "p_csmc": 128,
    "i_max": 100,
    "twist": "exact",
    "policy": "full",
    "resample": "none",
    "resample_threshold": 0.5,
    "rejuvenate": False,
    "mala_step": None,
    "warm_start": "extrapolate",
    "early_stop": True,
    "bridge": "every-step",
    "ess_trigger": 0.5,
    "smc_budget": "matched-n",
    "smc_resample": "threshold",
    "flow_particles": 100000,
}


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int = 1
    reps: int = 1
    out: str = "runs/out"
    threads: int = 1
    model: dict = field(default_factory=dict)
    sampler: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENT_IDS:
            raise UnknownExperiment(self.experiment)
        self.model = {**_MODEL_DEFAULTS, **(self.model or {})}
        self.sampler = {**_SAMPLER_DEFAULTS, **(self.sampler or {})}
        _validate(self)

    def to_dict(self):
        return asdict(self)


def _validate(cfg: ExperimentConfig):
    if int(cfg.reps) < 1:
        raise SchemaError("reps", "must be >= 1")
    if int(cfg.model["T"]) < 1:
        raise SchemaError("model.T", "must be >= 1")
    if int(cfg.sampler["n_particles"]) < 1:
        raise SchemaError("sampler.n_particles", "must be >= 1")
    for key, allowed in (
        ("twist", ("exact", "taylor1", "taylor2")),
        ("policy", ("full", "diagonal")),
        ("resample", ("none", "always", "threshold")),
        ("smc_resample", ("none", "always", "threshold")),
        ("warm_start", ("none", "copy", "extrapolate")),
        ("bridge", ("every-step", "two-marginal", "adaptive")),
    ):
        if cfg.sampler[key] not in allowed:
            raise SchemaError(f"sampler.{key}", f"unknown value {cfg.sampler[key]!r}")
    if cfg.model["schedule"] not in ("linear", "quadratic"):
        raise SchemaError("model.schedule", f"unknown value {cfg.model['schedule']!r}")
    if cfg.experiment == "logistic" and not cfg.model.get("dataset"):
        raise SchemaError("model.dataset", "logistic experiment requires a dataset path")


def parse_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        payload = yaml.safe_load(fh) or {}
    return config_from_dict(payload)


def config_from_dict(payload) -> ExperimentConfig:
    if not isinstance(payload, dict):
        raise SchemaError("<root>", "config must be a mapping")
    if "experiment" not in payload:
        raise SchemaError("experiment", "missing")
    known = {"experiment", "seed", "reps", "out", "threads", "model", "sampler"}
    unknown = set(payload) - known
    if unknown:
        raise SchemaError(sorted(unknown)[0], "unknown field")
    for section in ("model", "sampler"):
        sub = payload.get(section) or {}
        defaults = _MODEL_DEFAULTS if section == "model" else _SAMPLER_DEFAULTS
        for key in sub:
            if key not in defaults:
                raise SchemaError(f"{section}.{key}", "unknown field")
    return ExperimentConfig(
        experiment=payload["experiment"],
        seed=int(payload.get("seed", 1)),
        reps=int(payload.get("reps", 1)),
        out=str(payload.get("out", "runs/out")),
        threads=int(payload.get("threads", 1)),
        model=payload.get("model") or {},
        sampler=payload.get("sampler") or {},
    )


def serialize_config(cfg: ExperimentConfig):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def rep_rngs(master_seed, reps):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(master_seed).spawn(reps)]


def nearest_rank_quantile(values, q):
    """Nearest-rank quantile: the ceil(q*n)-th order statistic."""
    arr = np.sort(np.asarray(values, dtype=float))
    n = arr.shape[0]
    rank = max(1, int(np.ceil(q * n)))
    return float(arr[rank - 1])


def aggregate(values):
    return {
        "median": nearest_rank_quantile(values, 0.5),
        "q5": nearest_rank_quantile(values, 0.05),
        "q95": nearest_rank_quantile(values, 0.95),
    }


def _parallel_map(fn, arg_tuples, threads):
    if threads <= 1 or len(arg_tuples) <= 1:
        return [fn(*args) for args in arg_tuples]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(fn, *args) for args in arg_tuples]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# model/reference construction


def lqg_setup(model_cfg):
    model = LqgModel.equicorrelated(int(model_cfg["d"]), model_cfg["xi"], model_cfg["rho"])
    schedule = Schedule(model_cfg["schedule"], int(model_cfg["T"]))
    h = model_cfg["tau"] / schedule.T
    path = model.path(schedule)
    affine = langevin_reference_kernels(model, schedule, h)
    ref = ReferenceProcess(path, h, kind="langevin", affine=affine)
    return model, ref


def lqg_brownian_setup(model_cfg):
    model = LqgModel.equicorrelated(int(model_cfg["d"]), model_cfg["xi"], model_cfg["rho"])
    schedule = Schedule(model_cfg["schedule"], int(model_cfg["T"]))
    h = model_cfg["tau"] / schedule.T
    path = model.path(schedule)
    affine = brownian_reference_kernels(model.dim, schedule.T, h, model_cfg["sigma"])
    ref = ReferenceProcess(path, h, kind="brownian", sigma=model_cfg["sigma"], affine=affine)
    return model, ref


def build_ssb_config(sampler_cfg, T):
    early = EarlyStopConfig() if sampler_cfg["early_stop"] else None
    ipf = IpfConfig(
        i_max=int(sampler_cfg["i_max"]),
        csmc_m=int(sampler_cfg["m_csmc"]),
        csmc_p=int(sampler_cfg["p_csmc"]),
        twist_mode=sampler_cfg["twist"],
        diagonal=sampler_cfg["policy"] == "diagonal",
        early_stop=early,
    )
    adaptive = None
    if sampler_cfg["bridge"] == "adaptive":
        adaptive = AdaptiveSpec(trigger=float(sampler_cfg["ess_trigger"]),
                                i_max=int(sampler_cfg["i_max"]))
    return SsbConfig(
        n_particles=int(sampler_cfg["n_particles"]),
        ipf=ipf,
        bridge_times=(0, T) if sampler_cfg["bridge"] == "two-marginal" else None,
        adaptive=adaptive,
        resample=sampler_cfg["resample"],
        resample_threshold=float(sampler_cfg["resample_threshold"]),
        rejuvenate=bool(sampler_cfg["rejuvenate"]),
        mala_step_size=sampler_cfg["mala_step"],
        warm_start=sampler_cfg["warm_start"],
    )


def twisted_marginals(ref, policies):
    """Exact Gaussian marginals under exact-twisted affine kernels."""
    from .kernels import exact_twist

    base = ref.path.base.gaussian
    marg = [Gaussian(base.mean, base.cov)]
    for t in range(policies.t0 + 1, policies.t1 + 1):
        kern = ref.gaussian(t)
        pol = policies[t]
        if not pol.is_identity():
            kern = exact_twist(kern, pol, with_normalizer=False).kernel
        prev = marg[-1]
        marg.append(Gaussian(kern.K @ prev.mean + kern.r,
                             kern.H + kern.K @ prev.cov @ kern.K.T))
    return marg


# ---------------------------------------------------------------------------
# per-replication bodies (module level so they pickle for process pools)


def _rep_two_marginal(cfg, rng, n_iters):
    model, ref = lqg_setup(cfg.model)
    ipf_cfg = IpfConfig(
        i_max=n_iters,
        csmc_m=int(cfg.sampler["m_csmc"]),
        csmc_p=int(cfg.sampler["p_csmc"]),
        twist_mode=cfg.sampler["twist"],
    )
    n = int(cfg.sampler["n_particles"])
    policies, _ = approximate_ipf(
        ref, 0, ref.T, lambda r: ref.path.sample_base(r, n), ipf_cfg, rng
    )
    return twisted_marginals(ref, policies)


def _rep_lqg_ssb(cfg, rng):
    model, ref = lqg_setup(cfg.model)
    ssb_cfg = build_ssb_config(cfg.sampler, ref.T)
    n = int(cfg.sampler["n_particles"])
    tic = time.perf_counter()
    ensemble, _, seg = ssb_sampler(ref, ssb_cfg, rng)
    ssb_time = time.perf_counter() - tic
    tic = time.perf_counter()
    smc = smc_sampler(ref, n, rng, resample=cfg.sampler["smc_resample"],
                      resample_threshold=0.5, twist_mode=cfg.sampler["twist"])
    smc_time = time.perf_counter() - tic
    return {
        "log_z_ssb": estimate_logZ(ensemble),
        "log_z_smc": estimate_logZ(smc),
        "ssb_trace": ensemble.logz_trace,
        "smc_trace": smc.logz_trace,
        "ipf_iters_total": sum(s["ipf_iterations"] for s in seg),
        "ssb_s": ssb_time,
        "smc_s": smc_time,
    }


def _rep_highdim_variant(cfg, rng, mods):
    _, ref = lqg_setup(cfg.model)
    sampler_cfg = {**cfg.sampler, **mods}
    ssb_cfg = build_ssb_config(sampler_cfg, ref.T)
    tic = time.perf_counter()
    ensemble, _, _ = ssb_sampler(ref, ssb_cfg, rng)
    return estimate_logZ(ensemble), time.perf_counter() - tic


def _rep_smc_only(cfg, rng, n_smc, resample):
    _, ref = lqg_setup(cfg.model)
    tic = time.perf_counter()
    smc = smc_sampler(ref, n_smc, rng, resample=resample, twist_mode="taylor1")
    return estimate_logZ(smc), time.perf_counter() - tic


def _rep_ot(cfg, rng, n_iters):
    model, ref = lqg_brownian_setup(cfg.model)
    n = int(cfg.sampler["n_particles"])
    ipf_cfg = IpfConfig(
        i_max=n_iters,
        csmc_m=int(cfg.sampler["m_csmc"]),
        csmc_p=int(cfg.sampler["p_csmc"]),
        twist_mode=cfg.sampler["twist"],
    )
    policies, _ = approximate_ipf(
        ref, 0, ref.T, lambda r: ref.path.sample_base(r, n), ipf_cfg, rng
    )
    chain = TwistedChain(ref, policies, ipf_cfg.twist_mode)
    traj = propagate_segment(chain, 0, ref.T, ref.path.sample_base(rng, n), rng, ref.path)
    root, sq = w2_upper_estimate(CoupledSample(traj.states[0], traj.states[-1]))
    return {"w2_estimate": root, "w2_sq_estimate": sq}


def _rep_flow(cfg, rng):
    model, ref = lqg_setup(cfg.model)
    ssb_cfg = replace(build_ssb_config({**cfg.sampler, "resample": "none"}, ref.T),
                      store_trajectory=True)
    ensemble, policies, _ = ssb_sampler(ref, ssb_cfg, rng)
    per_t_policy = {seq.t1: seq[seq.t1] for seq in policies}
    ensembles = {t: ensemble.trajectory[t] for t in per_t_policy}
    return {"flow_cost_ssb": flow_cost_estimate(per_t_policy, ensembles, ref.h)}


def _rep_pf(ssm, ys, n_sb, n_boot, i_max, rng):
    sb = sbpf(ssm, ys, n_sb, rng, i_max=i_max)
    bpf = bootstrap_pf(ssm, ys, n_boot, rng)
    return {
        "loglik_sb": sb.loglik,
        "loglik_bpf": bpf.loglik,
        "sb_ess": sb.ess_trace / n_sb,
        "bpf_ess": bpf.ess_trace / n_boot,
    }


def _rep_logistic_ssb(cfg, rng):
    model = load_heart_dataset(cfg.model["dataset"])
    schedule = Schedule(cfg.model["schedule"], int(cfg.model["T"]))
    h = cfg.model["tau"] / schedule.T
    ref = ReferenceProcess(model.path(schedule), h, kind="langevin")
    ssb_cfg = build_ssb_config(cfg.sampler, ref.T)
    tic = time.perf_counter()
    ensemble, _, seg = ssb_sampler(ref, ssb_cfg, rng)
    elapsed = time.perf_counter() - tic
    return {
        "log_z_ssb": estimate_logZ(ensemble),
        "ipf_iters_total": sum(s["ipf_iterations"] for s in seg),
        "ssb_s": elapsed,
    }


def _rep_logistic_smc(cfg, rng, n_smc):
    model = load_heart_dataset(cfg.model["dataset"])
    schedule = Schedule(cfg.model["schedule"], int(cfg.model["T"]))
    h = cfg.model["tau"] / schedule.T
    ref = ReferenceProcess(model.path(schedule), h, kind="langevin")
    tic = time.perf_counter()
    smc = smc_sampler(ref, n_smc, rng, resample="always", twist_mode="taylor1")
    return {"log_z_smc": estimate_logZ(smc), "smc_s": time.perf_counter() - tic}


# ---------------------------------------------------------------------------
# drivers


def _driver_lqg_two_marginal(cfg, rngs):
    model, ref = lqg_setup(cfg.model)
    run = exact_lqg_ipf(Gaussian(model.mu0, model.sigma0), model.posterior(), ref.affine, 200)
    traces = w2_to_fixed_point(run, iters=range(6))
    per_time = []
    for i, trace in traces.items():
        for t, val in enumerate(trace, start=1):
            per_time.append({"series": f"exact_i{i}", "t": t, "log_w2": float(np.log(val)),
                             "q5": "", "q95": ""})
    n_iters = min(int(cfg.sampler["i_max"]), 5)
    s_marg = run.marginals_q(200)
    marg_reps = _parallel_map(_rep_two_marginal, [(cfg, rng, n_iters) for rng in rngs], cfg.threads)
    rows = {t: [] for t in range(1, ref.T + 1)}
    per_rep = []
    for rep, marginals in enumerate(marg_reps):
        w2s = [w2_gaussian(s, q) for s, q in zip(s_marg[1:], marginals[1:])]
        for t, val in enumerate(w2s, start=1):
            rows[t].append(np.log(val))
        per_rep.append({"rep": rep, "log_w2_T": float(np.log(w2s[-1]))})
    for t, vals in rows.items():
        agg = aggregate(vals)
        per_time.append({"series": f"approx_i{n_iters}", "t": t, "log_w2": agg["median"],
                         "q5": agg["q5"], "q95": agg["q95"]})
    summary = {"exact_terminal_log_w2_i5": float(np.log(traces[5][-1]))}
    return per_rep, per_time, summary, []


def _driver_lqg_ssb(cfg, rngs):
    model, ref = lqg_setup(cfg.model)
    log_z_true = model.log_normconst(1.0)
    schedule = Schedule(cfg.model["schedule"], ref.T)
    true_trace = np.array([model.log_normconst(schedule.value(t)) for t in range(ref.T + 1)])

    results = _parallel_map(_rep_lqg_ssb, [(cfg, rng) for rng in rngs], cfg.threads)
    per_rep = [
        {"rep": rep, "log_z_ssb": r["log_z_ssb"], "log_z_smc": r["log_z_smc"],
         "ipf_iters_total": r["ipf_iters_total"]}
        for rep, r in enumerate(results)
    ]
    times = [{"rep": rep, "ssb_s": r["ssb_s"], "smc_s": r["smc_s"]} for rep, r in enumerate(results)]
    ssb_arr = np.stack([r["ssb_trace"] for r in results])
    smc_arr = np.stack([r["smc_trace"] for r in results])
    per_time = []
    for t in range(ref.T + 1):
        per_time.append({
            "t": t,
            "log_z_true": float(true_trace[t]),
            "rmse_log_z_ssb": float(np.sqrt(np.mean((ssb_arr[:, t] - true_trace[t]) ** 2))),
            "rmse_log_z_smc": float(np.sqrt(np.mean((smc_arr[:, t] - true_trace[t]) ** 2))),
            **{f"ssb_{k}": v for k, v in aggregate(ssb_arr[:, t]).items()},
            **{f"smc_{k}": v for k, v in aggregate(smc_arr[:, t]).items()},
        })
    rmse_ssb = float(np.sqrt(np.mean((ssb_arr[:, -1] - log_z_true) ** 2)))
    rmse_smc = float(np.sqrt(np.mean((smc_arr[:, -1] - log_z_true) ** 2)))
    mean_ssb_s = float(np.mean([row["ssb_s"] for row in times]))
    mean_smc_s = float(np.mean([row["smc_s"] for row in times]))
    summary = {
        "log_z_true": log_z_true,
        "rmse_log_z_ssb": rmse_ssb,
        "rmse_log_z_smc": rmse_smc,
        "rmse_ratio_smc_over_ssb": rmse_smc / rmse_ssb if rmse_ssb > 0 else float("inf"),
        "mean_runtime_ssb_s": mean_ssb_s,
        "mean_runtime_smc_s": mean_smc_s,
        "runtime_ratio": mean_ssb_s / max(mean_smc_s, 1e-12),
    }
    return per_rep, per_time, summary, times


def _driver_lqg_highdim(cfg, rngs):
    model, _ = lqg_setup(cfg.model)
    log_z_true = model.log_normconst(1.0)
    n = int(cfg.sampler["n_particles"])
    variants = {
        "ssb_exact_rejuv": {"twist": "exact", "rejuvenate": True},
        "ssb_taylor_rejuv": {"twist": "taylor1", "rejuvenate": True},
    }
    results = {}
    times = {}
    for name, mods in variants.items():
        out = _parallel_map(
            _rep_highdim_variant, [(cfg, rng, mods) for rng in rngs], cfg.threads
        )
        results[name] = [v for v, _ in out]
        times[name] = [s for _, s in out]

    budget = cfg.sampler["smc_budget"]
    if budget == "matched-time":
        pilot_rng = np.random.default_rng(0)
        tic = time.perf_counter()
        _rep_smc_only(cfg, pilot_rng, n, "always")
        per_particle = (time.perf_counter() - tic) / n
        target = float(np.mean(times["ssb_exact_rejuv"]))
        n_smc = int(np.clip(target / per_particle, n, 200_000))
    elif budget == "matched-n":
        n_smc = n
    else:
        n_smc = int(budget)

    smc_out = _parallel_map(
        _rep_smc_only, [(cfg, rng, n_smc, "always") for rng in rngs], cfg.threads
    )
    smc_vals = [v for v, _ in smc_out]
    smc_times = [s for _, s in smc_out]

    per_rep = [
        {"rep": rep, "log_z_smc": smc_vals[rep],
         **{f"log_z_{name}": results[name][rep] for name in variants}}
        for rep in range(len(rngs))
    ]

    def rmse(vals):
        return float(np.sqrt(np.mean((np.asarray(vals) - log_z_true) ** 2)))

    summary = {
        "log_z_true": log_z_true,
        "n_smc": n_smc,
        "rmse_log_z_smc": rmse(smc_vals),
        "mean_runtime_smc_s": float(np.mean(smc_times)),
    }
    for name in variants:
        summary[f"rmse_log_z_{name}"] = rmse(results[name])
        summary[f"rmse_ratio_smc_over_{name}"] = summary["rmse_log_z_smc"] / max(
            summary[f"rmse_log_z_{name}"], 1e-300
        )
        summary[f"mean_runtime_{name}_s"] = float(np.mean(times[name]))
    timing_rows = [
        {"rep": rep, "smc_s": smc_times[rep],
         **{f"{name}_s": times[name][rep] for name in variants}}
        for rep in range(len(rngs))
    ]
    return per_rep, [], summary, timing_rows


def _driver_ot_brownian(cfg, rngs):
    model, _ = lqg_brownian_setup(cfg.model)
    exact = w2_gaussian(Gaussian(model.mu0, model.sigma0), model.posterior())
    n_iters = min(int(cfg.sampler["i_max"]), 5)
    rows = _parallel_map(_rep_ot, [(cfg, rng, n_iters) for rng in rngs], cfg.threads)
    per_rep = [{"rep": rep, **row} for rep, row in enumerate(rows)]
    estimates = [row["w2_estimate"] for row in rows]
    summary = {
        "w2_exact": exact,
        "mean_w2_estimate": float(np.mean(estimates)),
        "sd_w2_estimate": float(np.std(estimates, ddof=1)) if len(estimates) > 1 else 0.0,
    }
    return per_rep, [], summary, []


def _driver_flow_transport(cfg, rngs):
    model, ref = lqg_setup(cfg.model)
    tau = cfg.model["tau"]
    flow_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    exact_cost, _ = lqg_flow_transport(
        model, tau, ref.T, int(cfg.sampler["flow_particles"]), flow_rng
    )
    rows = _parallel_map(_rep_flow, [(cfg, rng) for rng in rngs], cfg.threads)
    per_rep = [{"rep": rep, **row} for rep, row in enumerate(rows)]
    costs = [row["flow_cost_ssb"] for row in rows]
    summary = {
        "flow_cost_exact_policy": exact_cost,
        "mean_flow_cost_ssb": float(np.mean(costs)),
        "sd_flow_cost_ssb": float(np.std(costs, ddof=1)) if len(costs) > 1 else 0.0,
    }
    return per_rep, [], summary, []


def _driver_pf_compare(cfg, rngs):
    model_cfg = cfg.model
    ssm = LinearSsm(
        dim=int(model_cfg["d"]), alpha=model_cfg["alpha"],
        h=model_cfg["tau"] / int(model_cfg["T"]), T=int(model_cfg["T"]),
        sigma_obs=model_cfg["sigma_obs"],
    )
    data_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    _, ys = ssm.simulate(data_rng)
    kf = kalman(ssm, ys)
    n_sb = int(cfg.sampler["n_particles"])
    i_max = int(cfg.sampler["i_max"])

    budget = cfg.sampler["smc_budget"]
    if budget == "matched-time":
        pilot = np.random.default_rng(0)
        tic = time.perf_counter()
        sbpf(ssm, ys, n_sb, pilot, i_max=i_max)
        t_sb = time.perf_counter() - tic
        tic = time.perf_counter()
        bootstrap_pf(ssm, ys, 10_000, pilot)
        per_particle = (time.perf_counter() - tic) / 10_000
        n_boot = int(np.clip(t_sb / per_particle, n_sb, 200_000))
    elif budget == "matched-n":
        n_boot = n_sb
    else:
        n_boot = int(budget)

    rows = _parallel_map(
        _rep_pf, [(ssm, ys, n_sb, n_boot, i_max, rng) for rng in rngs], cfg.threads
    )
    per_rep = [
        {"rep": rep, "loglik_sb": r["loglik_sb"], "loglik_bpf": r["loglik_bpf"]}
        for rep, r in enumerate(rows)
    ]
    sb_ess = np.stack([r["sb_ess"] for r in rows])
    bpf_ess = np.stack([r["bpf_ess"] for r in rows])
    per_time = []
    for t in range(ssm.T):
        per_time.append({
            "t": t + 1,
            "ess_frac_sb_median": nearest_rank_quantile(sb_ess[:, t], 0.5),
            "ess_frac_bpf_median": nearest_rank_quantile(bpf_ess[:, t], 0.5),
            "kalman_loglik": float(kf.loglik_trace[t]),
        })
    sb_ll = np.asarray([r["loglik_sb"] for r in rows])
    bpf_ll = np.asarray([r["loglik_bpf"] for r in rows])
    frac_better = float(np.mean([
        row["ess_frac_sb_median"] > row["ess_frac_bpf_median"] for row in per_time
    ]))
    summary = {
        "kalman_loglik": kf.loglik,
        "n_bootstrap": n_boot,
        "ess_frac_sb_wins": frac_better,
        "var_loglik_sb": float(np.var(sb_ll, ddof=1)) if len(rows) > 1 else 0.0,
        "var_loglik_bpf": float(np.var(bpf_ll, ddof=1)) if len(rows) > 1 else 0.0,
        "mean_loglik_sb": float(np.mean(sb_ll)),
        "mean_loglik_bpf": float(np.mean(bpf_ll)),
    }
    return per_rep, per_time, summary, []


def _driver_logistic(cfg, rngs):
    rows = _parallel_map(_rep_logistic_ssb, [(cfg, rng) for rng in rngs], cfg.threads)
    ssb_vals = [r["log_z_ssb"] for r in rows]
    per_rep = [
        {"rep": rep, "log_z_ssb": r["log_z_ssb"], "ipf_iters_total": r["ipf_iters_total"]}
        for rep, r in enumerate(rows)
    ]
    times = [{"rep": rep, "ssb_s": r["ssb_s"]} for rep, r in enumerate(rows)]

    n = int(cfg.sampler["n_particles"])
    budget = cfg.sampler["smc_budget"]
    if budget == "matched-time":
        pilot = np.random.default_rng(0)
        tic = time.perf_counter()
        _rep_logistic_smc(cfg, pilot, n)
        per_particle = (time.perf_counter() - tic) / n
        target = float(np.mean([row["ssb_s"] for row in times]))
        n_smc = int(np.clip(target / per_particle, n, 500_000))
    elif budget == "matched-n":
        n_smc = n
    else:
        n_smc = int(budget)

    smc_rows = _parallel_map(
        _rep_logistic_smc, [(cfg, rng, n_smc) for rng in rngs], cfg.threads
    )
    smc_vals = [r["log_z_smc"] for r in smc_rows]
    for rep, r in enumerate(smc_rows):
        per_rep[rep]["log_z_smc"] = r["log_z_smc"]
        times[rep]["smc_s"] = r["smc_s"]

    summary = {
        "n_smc": n_smc,
        "mean_log_z_ssb": float(np.mean(ssb_vals)),
        "sd_log_z_ssb": float(np.std(ssb_vals, ddof=1)) if len(ssb_vals) > 1 else 0.0,
        "mean_log_z_smc": float(np.mean(smc_vals)),
        "sd_log_z_smc": float(np.std(smc_vals, ddof=1)) if len(smc_vals) > 1 else 0.0,
    }
    return per_rep, [], summary, times


_DRIVERS = {
    "lqg-two-marginal": _driver_lqg_two_marginal,
    "lqg-ssb": _driver_lqg_ssb,
    "lqg-highdim": _driver_lqg_highdim,
    "ot-brownian": _driver_ot_brownian,
    "flow-transport": _driver_flow_transport,
    "pf-compare": _driver_pf_compare,
    "logistic": _driver_logistic,
}


def _git_describe():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, check=False, timeout=10,
        )
        return out.stdout.strip() or "unknown"
    except OSError:
        return "unknown"


def _write_csv(path, rows):
    if not rows:
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def run_experiment(cfg: ExperimentConfig, out_dir=None):
    """Execute the configured study and write its output files.

    Returns the summary dict. Output directory precedence: explicit argument,
    then the SBSAMPLER_OUT environment variable, then cfg.out.
    """
    import os

    out = Path(out_dir or os.environ.get("SBSAMPLER_OUT") or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    driver = _DRIVERS[cfg.experiment]
    rngs = rep_rngs(cfg.seed, cfg.reps)
    tic = time.perf_counter()
    per_rep, per_time, summary, timing_rows = driver(cfg, rngs)
    wall = time.perf_counter() - tic

    _write_csv(out / "per_rep.csv", per_rep)
    _write_csv(out / "per_time.csv", per_time)
    _write_csv(out / "timing.csv", timing_rows)
    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "git_describe": _git_describe(),
        "package_version": __version__,
        "wall_time_s": wall,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1)
    return summary
