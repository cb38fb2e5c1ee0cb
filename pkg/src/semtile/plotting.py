"""Figures for run logs and arm comparisons (Agg backend, PNG files)."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 3.6),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "svg.hashsalt": "semtile",
}

REGIME_COLORS = {"calm": "#4c72b0", "storm": "#dd8452"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no Software key: keeps the bytes stable across matplotlib patch releases
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_chunk_log(rows, path, title: str = "") -> Path:
    """Margin and working alpha per chunk, colored by decision regime; stall ms underneath."""
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=(6.4, 4.2),
                                       gridspec_kw={"height_ratios": [2, 1]})
        for reg, col in REGIME_COLORS.items():
            xs = [r.chunk for r in rows if r.regime == reg and math.isfinite(r.margin_deg)]
            ys = [r.margin_deg for r in rows if r.regime == reg and math.isfinite(r.margin_deg)]
            if xs:
                ax1.scatter(xs, ys, s=4, color=col, label=reg, linewidths=0)
        ax1.set_ylabel("margin (deg)")
        alphas = [(r.chunk, r.alpha) for r in rows if math.isfinite(r.alpha)]
        if alphas:
            ax1b = ax1.twinx()
            ax1b.plot(*zip(*alphas), color="0.3", lw=0.8)
            ax1b.set_ylabel("alpha")
        if any(math.isfinite(r.margin_deg) for r in rows):
            ax1.legend(loc="upper left", markerscale=3)
        ax2.bar([r.chunk for r in rows], [r.stall_ms for r in rows], width=1.0, color="#c44e52")
        ax2.set_ylabel("stall (ms)")
        ax2.set_xlabel("chunk")
        if title:
            ax1.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_arm_comparison(report: dict, metric: str, path) -> Path:
    """Mean per arm, with the paired-delta CI drawn around each non-baseline arm's mean."""
    arms = sorted(report["arms"])
    base = report["baseline"]
    means = [report["arms"][a]["mean"].get(metric) for a in arms]
    means = [math.nan if m is None else m for m in means]
    base_mean = report["arms"][base]["mean"].get(metric) or 0.0
    err_lo, err_hi = [], []
    for a, m in zip(arms, means):
        d = report["deltas"].get(a, {}).get(metric)
        if a == base or d is None or d["ci"][0] is None:
            err_lo.append(0.0)
            err_hi.append(0.0)
            continue
        lo, hi = d["ci"]
        err_lo.append(max(0.0, m - (base_mean + lo)))
        err_hi.append(max(0.0, base_mean + hi - m))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        colors = ["0.55" if a == base else "#4c72b0" for a in arms]
        ax.bar(range(len(arms)), means, yerr=[err_lo, err_hi], color=colors, capsize=3)
        ax.set_xticks(range(len(arms)))
        ax.set_xticklabels(arms, rotation=20, ha="right")
        ax.set_ylabel(metric)
        ax.set_title(f"{metric} (baseline: {base})")
        fig.tight_layout()
        return _save(fig, path)
