"""PNG figures written next to the CSV reports (Agg backend, no display needed)."""

from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_history(history, path, key="vae_bound"):
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for split, style in (("train", "-"), ("val", "--")):
        rows = [r for r in history if r["split"] == split]
        if rows:
            ax.plot([r["epoch"] for r in rows], [r[key] for r in rows], style, label=split)
    ax.set_xlabel("epoch")
    ax.set_ylabel(f"{key} per frame")
    ax.legend()
    return _save(fig, path)


def plot_long(rows, path, ylabel=None):
    """Lines from long-format (metric, x, y, group) rows, one panel per metric."""
    by_metric = defaultdict(lambda: defaultdict(list))
    for metric, x, y, group in rows:
        by_metric[metric][group].append((x, y))
    metrics = sorted(by_metric)
    fig, axes = plt.subplots(1, len(metrics), figsize=(6 * len(metrics), 3.8), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        for group, pts in sorted(by_metric[metric].items()):
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], label=group,
                    linestyle="--" if group.startswith("iwae") else "-")
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel or metric)
        ax.legend(fontsize=7)
    return _save(fig, path)


def plot_kl_grid(results, path):
    fig, ax = plt.subplots(figsize=(5, 4))
    a = np.array([r.analytic for r in results])
    m = np.array([r.mc for r in results])
    se = np.array([r.std_err for r in results])
    ax.errorbar(a, m, yerr=2 * se, fmt="o", capsize=3)
    lim = [a.min() * 0.8, a.max() * 1.2]
    ax.plot(lim, lim, "k:", lw=1)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("closed-form KL")
    ax.set_ylabel("Monte-Carlo KL (±2 se)")
    return _save(fig, path)


def plot_bound_sweep(sweep, path):
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for name, marker in (("vae", "s"), ("iwae", "o")):
        rows = [r for r in sweep.rows if r.bound == name]
        ax.errorbar([r.K for r in rows], [r.mean for r in rows], yerr=[3 * r.std_err for r in rows],
                    marker=marker, capsize=3, label=name)
    ax.set_xscale("log")
    ax.set_xlabel("K")
    ax.set_ylabel("bound per frame (±3 se)")
    ax.legend()
    return _save(fig, path)


def plot_gradient_spread(report_samples, path):
    """Histograms of the drift-parameter gradient for the two diffusion choices."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    for ax, (label, vals) in zip(axes, report_samples.items()):
        vals = np.asarray(vals)
        if np.ptp(vals) == 0:
            ax.axvline(vals[0], color="C0")
            ax.set_title(f"{label}: constant {vals[0]:.4g}")
        else:
            ax.hist(vals, bins=60, color="C1")
            ax.set_title(f"{label}: var {np.var(vals):.3g}")
        ax.set_xlabel("dL/dphi")
    return _save(fig, path)


def plot_frames(frames, path, max_series=3):
    """Observed values against sample-mean predictions for a few sequences."""
    uids = list(dict.fromkeys(frames["uid"]))[:max_series]
    fig, axes = plt.subplots(len(uids), 1, figsize=(7, 2.4 * max(len(uids), 1)), squeeze=False)
    for ax, uid in zip(axes[:, 0], uids):
        sel = [i for i, u in enumerate(frames["uid"]) if u == uid]
        t = np.asarray(frames["time"])[sel]
        for j, (truth, pred) in enumerate(zip(frames["truth"], frames["pred"])):
            ax.plot(t, np.asarray(truth)[sel], ".", color=f"C{j}", ms=4)
            ax.plot(t, np.asarray(pred)[sel], "-", color=f"C{j}", lw=1)
        ax.set_ylabel(f"series {uid}")
    axes[-1, 0].set_xlabel("time")
    return _save(fig, path)
