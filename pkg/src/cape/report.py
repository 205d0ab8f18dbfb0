"""Matplotlib figures rendered next to the delimited outputs.

Every renderer takes already-computed arrays and a target path; nothing here
recomputes statistics. The Agg backend keeps rendering headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 130


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def trajectory_figure(trajectories, path, max_panels: int = 4) -> None:
    """Compartment fractions and the observed series for a few samples."""
    n = min(max_panels, len(trajectories))
    fig, axes = plt.subplots(n, 2, figsize=(9, 2.4 * n), squeeze=False)
    for row, traj in enumerate(trajectories[:n]):
        ax = axes[row][0]
        for name, color in (("S", "tab:blue"), ("I", "tab:red"),
                            ("R", "tab:green"), ("D", "tab:gray")):
            ax.plot(traj.times, traj.compartment(name), label=name, color=color)
        ax.set_ylabel("fraction")
        if row == 0:
            ax.legend(ncol=4, fontsize=8)
            ax.set_title("compartments")
        ax2 = axes[row][1]
        ax2.plot(traj.times, traj.observed, color="tab:orange")
        if row == 0:
            ax2.set_title("observed cases")
    axes[-1][0].set_xlabel("time")
    axes[-1][1].set_xlabel("time")
    _finish(fig, path)


def loss_curves_figure(history: dict[str, list[float]], path) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    epochs = np.arange(len(history.get("train_loss", [])))
    ax1.plot(epochs, history.get("train_loss", []), label="train")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("total loss")
    ax1.legend(fontsize=8)
    ax2.plot(epochs, history.get("val_loss", []), color="tab:red",
             label="val masked-recon MSE")
    for key in ("recon", "contrastive"):
        if key in history and history[key]:
            ax2.plot(epochs, history[key], alpha=0.6, label=key)
    ax2.set_xlabel("epoch")
    ax2.legend(fontsize=8)
    _finish(fig, path)


def forecast_figure(x: np.ndarray, y: np.ndarray, y_hat: np.ndarray, path,
                    max_panels: int = 4) -> None:
    """Lookback, target, and prediction for a few windows."""
    n = min(max_panels, len(x))
    fig, axes = plt.subplots(n, 1, figsize=(7, 2.2 * n), squeeze=False)
    T = x.shape[1]
    h = y.shape[1]
    for i in range(n):
        ax = axes[i][0]
        ax.plot(np.arange(T), x[i], color="tab:blue", label="lookback")
        ax.plot(np.arange(T, T + h), y[i], "o-", color="tab:green",
                label="target")
        ax.plot(np.arange(T, T + h), y_hat[i], "x--", color="tab:red",
                label="prediction")
        if i == 0:
            ax.legend(ncol=3, fontsize=8)
    axes[-1][0].set_xlabel("step")
    _finish(fig, path)


def alignment_figure(report, path) -> None:
    """Group-summed mixture weights against the true compartment fractions."""
    names = list(report.model_signals)
    fig, axes = plt.subplots(1, len(names), figsize=(3.2 * len(names), 3.0),
                             squeeze=False)
    for i, name in enumerate(names):
        ax = axes[0][i]
        w = report.window_starts
        ax.plot(w, report.truth_signals[name], color="tab:blue", label="true")
        ax2 = ax.twinx()
        ax2.plot(w, report.model_signals[name], color="tab:red",
                 label="inferred")
        rho = report.correlations[name]
        ax.set_title(f"{name} (rho={rho:.2f})", fontsize=9)
        ax.set_xlabel("window start")
        if i == 0:
            ax.set_ylabel("true fraction")
    _finish(fig, path)


def dbi_heatmap_figure(labels, matrix: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.8))
    im = ax.imshow(matrix, cmap="viridis")
    ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right",
                  fontsize=8)
    ax.set_yticks(range(len(labels)), labels, fontsize=8)
    for i in range(len(labels)):
        for j in range(len(labels)):
            if not np.isnan(matrix[i, j]):
                ax.text(j, i, f"{matrix[i, j]:.2f}", ha="center", va="center",
                        color="white", fontsize=7)
    fig.colorbar(im, ax=ax, label="pairwise DBI")
    _finish(fig, path)


def metrics_figure(reports: dict[int, dict[str, float]], path) -> None:
    """MSE/MAE bars by horizon; reports maps horizon -> {metric: value}."""
    horizons = sorted(reports)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.0))
    xs = np.arange(len(horizons))
    ax1.bar(xs, [reports[h].get("mse", np.nan) for h in horizons],
            color="tab:blue")
    ax1.set_xticks(xs, [str(h) for h in horizons])
    ax1.set_xlabel("horizon")
    ax1.set_title("MSE")
    ax2.bar(xs, [reports[h].get("mae", np.nan) for h in horizons],
            color="tab:orange")
    ax2.set_xticks(xs, [str(h) for h in horizons])
    ax2.set_xlabel("horizon")
    ax2.set_title("MAE")
    _finish(fig, path)
