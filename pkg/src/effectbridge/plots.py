"""Matplotlib renderers for the CLI report paths.

Every figure is written straight to a file with the Agg backend; each plot
has a CSV sibling carrying the same numbers, so the images are a
convenience view, not the data of record.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_rmse_figure(rows, n: int, path) -> None:
    """Accuracy-versus-noise-rate panel for one sample size."""
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for tag in sorted({r.estimator for r in rows}):
        pts = sorted((r.alpha, r.rmse) for r in rows if r.estimator == tag)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=tag)
    ax.set_xlabel("nuisance rate exponent alpha")
    ax.set_ylabel("RMSE")
    ax.set_title(f"n = {n}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_sensitivity_figure(point: float, scale: float, path) -> None:
    """Two break-even wedges: one per sensitivity parameter.

    The left panel varies the exchangeability slack with the
    transportability slack at zero; the right panel does the reverse.
    ``scale`` multiplies the transportability slack (1 for transportation,
    the target share for generalization).
    """
    magnitude = abs(point) if point != 0 else 1.0
    fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.4), sharey=True)
    grids = [("exchangeability slack delta1", np.linspace(0, 2 * magnitude, 101), 1.0),
             ("transportability slack delta2",
              np.linspace(0, magnitude / scale, 101), 2.0 * scale)]
    for ax, (label, grid, slope) in zip(axes, grids):
        ax.fill_between(grid, point - slope * grid, point + slope * grid,
                        alpha=0.3, label="bound interval")
        ax.axhline(0.0, color="black", lw=0.8)
        ax.axhline(point, color="C1", lw=0.8, ls="--", label="point estimate")
        ax.set_xlabel(label)
        ax.legend(fontsize=8)
    axes[0].set_ylabel("effect bound")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_estimates_figure(records: list, path) -> None:
    """Forest plot of point estimates with 95% intervals."""
    fig, ax = plt.subplots(figsize=(6.0, 0.6 * max(4, len(records))))
    labels, points, lowers, uppers = [], [], [], []
    for rec in records:
        extra = " (survey)" if rec.get("survey") else ""
        labels.append(f"{rec['method']}{extra} arm={rec['arm']}")
        points.append(rec["point"])
        lowers.append(rec["point"] - rec["ci_lower"])
        uppers.append(rec["ci_upper"] - rec["point"])
    ypos = np.arange(len(records))[::-1]
    ax.errorbar(points, ypos, xerr=[lowers, uppers], fmt="o", capsize=3)
    ax.axvline(0.0, color="black", lw=0.8, ls=":")
    ax.set_yticks(ypos)
    ax.set_yticklabels(labels)
    ax.set_xlabel("effect estimate")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_compare_figure(rows, path) -> None:
    """Quadratic-versus-doubly-robust RMSE panels, one per (n, k)."""
    configs = sorted({(r.n, r.k) for r in rows})
    fig, axes = plt.subplots(1, len(configs), figsize=(4.0 * len(configs), 3.4),
                             squeeze=False)
    for ax, (n, k) in zip(axes[0], configs):
        for method in ("dr", "qr"):
            pts = sorted((r.alpha, r.rmse) for r in rows
                         if r.method == method and r.n == n and r.k == k)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=method)
        ax.set_title(f"n = {n}, k = {k}")
        ax.set_xlabel("alpha")
        ax.set_ylabel("RMSE")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
