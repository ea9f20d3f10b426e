"""Render figures from a run directory's CSV output.

Reads the delimited files written by ``run_experiment`` and produces PNG
figures alongside them (W2 traces, RMSE curves, ESS fractions), mirroring
the plots the experiments are designed to reproduce.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def _read_csv(path):
    if not Path(path).exists():
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        parsed = {}
        for key, val in row.items():
            try:
                parsed[key] = float(val)
            except (TypeError, ValueError):
                parsed[key] = val
        out.append(parsed)
    return out


def _fig_path(out_dir, name):
    fig_dir = Path(out_dir) / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    return fig_dir / name


def _plot_series(ax, rows, x_key, y_key, label, **kwargs):
    xs = [r[x_key] for r in rows]
    ys = [r[y_key] for r in rows]
    ax.plot(xs, ys, label=label, **kwargs)


def render_run(out_dir):
    """Render every figure supported by the files present; returns paths."""
    out_dir = Path(out_dir)
    with open(out_dir / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    experiment = manifest["config"]["experiment"]
    per_time = _read_csv(out_dir / "per_time.csv")
    per_rep = _read_csv(out_dir / "per_rep.csv")
    produced = []

    if experiment == "lqg-two-marginal" and per_time:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        series = sorted({r["series"] for r in per_time})
        for name in series:
            rows = [r for r in per_time if r["series"] == name]
            style = "--" if str(name).startswith("approx") else "-"
            _plot_series(ax, rows, "t", "log_w2", name, linestyle=style)
        ax.set_xlabel("t")
        ax.set_ylabel("log W2 to bridge marginal")
        ax.legend(fontsize=7, ncol=2)
        path = _fig_path(out_dir, "w2_traces.png")
        fig.savefig(path, dpi=150, bbox_inches="tight")
        plt.close(fig)
        produced.append(path)

    if experiment == "lqg-ssb" and per_time:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        rows = [r for r in per_time if r["t"] > 0]
        for key, label in (("rmse_log_z_ssb", "bridge sampler"), ("rmse_log_z_smc", "SMC")):
            ax.plot([r["t"] for r in rows], [r[key] for r in rows], label=label)
        ax.set_yscale("log")
        ax.set_xlabel("t")
        ax.set_ylabel("RMSE of log Z_t estimate")
        ax.legend()
        path = _fig_path(out_dir, "rmse_logz.png")
        fig.savefig(path, dpi=150, bbox_inches="tight")
        plt.close(fig)
        produced.append(path)

    if experiment == "pf-compare" and per_time:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for key, label in (
            ("ess_frac_sb_median", "bridge particle filter"),
            ("ess_frac_bpf_median", "bootstrap particle filter"),
        ):
            ax.plot([r["t"] for r in per_time], [r[key] for r in per_time], label=label)
        ax.set_xlabel("t")
        ax.set_ylabel("median ESS / N")
        ax.set_ylim(0, 1.05)
        ax.legend()
        path = _fig_path(out_dir, "ess_fraction.png")
        fig.savefig(path, dpi=150, bbox_inches="tight")
        plt.close(fig)
        produced.append(path)

    if per_rep and any("log_z" in k for k in per_rep[0]):
        keys = [k for k in per_rep[0] if k.startswith("log_z")]
        fig, ax = plt.subplots(figsize=(6, 4))
        data = [[r[k] for r in per_rep] for k in keys]
        ax.boxplot(data, tick_labels=keys)
        ax.set_ylabel("log Z estimate")
        ax.tick_params(axis="x", labelsize=7, rotation=20)
        path = _fig_path(out_dir, "logz_estimates.png")
        fig.savefig(path, dpi=150, bbox_inches="tight")
        plt.close(fig)
        produced.append(path)

    return produced
