"""Figure rendering for run reports. Files only, no interactive backends."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import fogsim


#: diverging runs can log astronomically large losses; cap plotted values
#: so the log axis stays renderable
_PLOT_CAP = 1e12


def loss_curve(metrics: list, path):
    """Per-step loss terms from a training run's metrics rows."""
    steps = [m["step"] for m in metrics]

    def series(key):
        vals = np.array([m.get(key, 0.0) for m in metrics], dtype=np.float64)
        return np.clip(np.nan_to_num(vals, nan=_PLOT_CAP, posinf=_PLOT_CAP,
                                     neginf=0.0), 0.0, _PLOT_CAP)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, series("l_total"), label="total", lw=1.2)
    ax.plot(steps, series("l_obj"), label="detection", lw=0.8)
    if any(m.get("l_perc") for m in metrics):
        ax.plot(steps, series("l_perc"), label="perceptual", lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def map_bars(rows: list, path):
    """Grouped per-category AP bars, one group per evaluation split."""
    cats = list(fogsim.CATEGORIES)
    splits = [r["split"] for r in rows]
    x = np.arange(len(cats) + 1)
    width = 0.8 / max(1, len(rows))
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for i, row in enumerate(rows):
        vals = [row["per_category"].get(c) or 0.0 for c in cats] + [row["map50"]]
        ax.bar(x + i * width, vals, width, label=row["split"])
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels([*cats, "mAP"], fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("AP@50")
    ax.legend(frameon=False, fontsize=8, title="split")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
