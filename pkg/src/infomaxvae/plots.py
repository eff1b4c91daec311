"""Figure rendering for run artifacts.

Each plotting function reads a CSV the pipeline already wrote and drops a
PNG next to it.  Rendering is headless (Agg) and best-effort decoration:
columns that are all-NaN are simply skipped.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import metrics as metricsmod


def plot_metrics(csv_path, out_path=None) -> Path:
    """Training curves: one panel per metric with any finite values."""
    csv_path = Path(csv_path)
    records = metricsmod.read_metrics_csv(csv_path)
    steps = [r.step for r in records]
    panels = [
        ("elbo", [r.elbo for r in records]),
        ("kl", [r.kl for r in records]),
        ("au", [float(r.au) for r in records]),
        ("mi", [r.mi for r in records]),
        ("probe_acc", [r.probe_acc for r in records]),
    ]
    panels = [(name, vals) for name, vals in panels
              if np.isfinite(vals).any()]
    fig, axes = plt.subplots(1, max(len(panels), 1),
                             figsize=(4 * max(len(panels), 1), 3.2))
    if len(panels) <= 1:
        axes = [axes]
    for ax, (name, vals) in zip(axes, panels):
        ax.plot(steps, vals, marker="o", markersize=3)
        ax.set_xlabel("step")
        ax.set_ylabel(name)
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path) if out_path else csv_path.with_suffix(".png")
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def plot_latents(csv_path, out_path=None) -> Path:
    """Scatter of the first two posterior-mean coordinates, colored by label."""
    csv_path = Path(csv_path)
    table = np.genfromtxt(csv_path, delimiter=",", names=True)
    labels = table["label"].astype(int)
    if "mu_2" in (table.dtype.names or ()):
        xs, ys = table["mu_1"], table["mu_2"]
        ylabel = "mu_2"
    else:
        xs, ys = table["mu_1"], np.zeros_like(table["mu_1"])
        ylabel = ""
    fig, ax = plt.subplots(figsize=(5, 5))
    if (labels >= 0).any():
        scatter = ax.scatter(xs, ys, c=labels, s=6, cmap="tab10", alpha=0.7)
        fig.colorbar(scatter, ax=ax, label="label")
    else:
        ax.scatter(xs, ys, s=6, alpha=0.7)
    ax.set_xlabel("mu_1")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path) if out_path else csv_path.with_suffix(".png")
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path
