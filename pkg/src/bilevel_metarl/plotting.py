"""PNG figures for run directories (Agg backend, no display needed)."""

from __future__ import annotations

from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "svg.hashsalt": "bilevel-metarl",
}
COLORS = {"bilevel": "#1f77b4", "maml": "#d62728"}
METRIC_NAMES = {1: "KL(meta || adapted)", 2: "KL(adapted || meta)", 3: "squared L2"}


def _save(fig, path):
    fig.tight_layout()
    # no timestamp metadata so reruns produce the same file
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_meta_test_curves(path, curves: Dict[str, Sequence[tuple]], title: str = ""):
    """Mean accumulated reward against adaptation steps, one line per label.

    Each curve is a list of (step, mean, std); the band is one task std.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        for label, curve in curves.items():
            k, m, s = (np.array(c) for c in zip(*curve))
            color = COLORS.get(label.split()[0])
            ax.plot(k, m, marker="o", ms=3, label=label, color=color)
            ax.fill_between(k, m - s, m + s, alpha=0.15, color=color, lw=0)
        ax.set_xlabel("adaptation steps")
        ax.set_ylabel("mean accumulated reward")
        ax.set_title(title)
        ax.legend(fontsize=7)
        _save(fig, path)


def plot_grad_norms(path, norms: Dict[str, np.ndarray], title: str = "", window: int = 20):
    """Squared hypergradient norm per iteration with a running mean."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        for label, g in norms.items():
            g2 = np.asarray(g) ** 2
            line, = ax.plot(g2, lw=0.6, alpha=0.35)
            if g2.size >= window:
                smooth = np.convolve(g2, np.ones(window) / window, mode="valid")
                ax.plot(np.arange(window - 1, g2.size), smooth, lw=1.2,
                        color=line.get_color(), label=label)
            else:
                line.set_label(label)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("squared gradient norm")
        ax.set_title(title)
        ax.legend(fontsize=7)
        _save(fig, path)


def plot_gap_vs_bound(path, rows: Sequence[dict], title: str = ""):
    """Measured optimality gap next to the bound for each (preset, metric)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.6, 3.0))
        labels = [f"{r['preset']}\nm{r['metric']}" for r in rows]
        x = np.arange(len(rows))
        gap = np.array([max(r["teog"], 1e-12) for r in rows])
        gap_thm = np.array([max(r["teog_theorem_lambda"], 1e-12) for r in rows])
        bound = np.array([max(r["bound"], 1e-12) for r in rows])
        ax.bar(x - 0.27, gap, 0.27, label="gap (training lambda)")
        ax.bar(x, gap_thm, 0.27, label="gap (theorem lambda)")
        ax.bar(x + 0.27, bound, 0.27, label="bound")
        ax.set_yscale("log")
        ax.set_xticks(x)
        ax.set_xticklabels(labels, fontsize=7)
        ax.set_ylabel("task-expected optimality gap")
        ax.set_title(title)
        ax.legend(fontsize=7)
        _save(fig, path)
