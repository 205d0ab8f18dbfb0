"""Forecast metrics, naive baselines, and representation statistics.

CMD sums Euclidean distances between elementwise central moments of two
embedding sets (mean first, then orders 2..K). DBI is the classic
worst-pair ratio of intra-cluster spread to centroid separation, averaged
over clusters; lower means better separated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import CapeModel
from .sim import Trajectory


class AnalysisError(ValueError):
    pass


# ---------------------------------------------------------------------------
# forecast metrics

@dataclass
class MetricReport:
    horizon: int
    mse: float
    mae: float
    n_windows: int
    residual_min: float
    residual_max: float
    residual_mean: float

    def row(self) -> dict:
        return {"horizon": self.horizon, "mse": self.mse, "mae": self.mae,
                "n_windows": self.n_windows,
                "residual_min": self.residual_min,
                "residual_max": self.residual_max,
                "residual_mean": self.residual_mean}


def forecast_metrics(predictions: np.ndarray, targets: np.ndarray) -> MetricReport:
    """Per-horizon MSE/MAE: mean over steps within a window, then over
    windows."""
    predictions = np.asarray(predictions, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if predictions.shape != targets.shape or predictions.ndim != 2:
        raise AnalysisError(f"aligned (n_windows, h) arrays required, got "
                            f"{predictions.shape} vs {targets.shape}")
    if predictions.size == 0:
        raise AnalysisError("no windows to score")
    residuals = predictions - targets
    per_window_mse = np.mean(residuals ** 2, axis=1)
    per_window_mae = np.mean(np.abs(residuals), axis=1)
    return MetricReport(
        horizon=predictions.shape[1],
        mse=float(per_window_mse.mean()),
        mae=float(per_window_mae.mean()),
        n_windows=predictions.shape[0],
        residual_min=float(residuals.min()),
        residual_max=float(residuals.max()),
        residual_mean=float(residuals.mean()),
    )


def average_metrics(reports: list[MetricReport]) -> dict:
    """Mean MSE/MAE across per-horizon reports (the Avg row)."""
    if not reports:
        raise AnalysisError("no reports to average")
    return {"mse": float(np.mean([r.mse for r in reports])),
            "mae": float(np.mean([r.mae for r in reports]))}


def naive_baselines(xs: np.ndarray, ys: np.ndarray,
                    train_mean: float = 0.0) -> dict[str, MetricReport]:
    """Persistence repeats each window's last observation; mean predicts the
    training-split mean (0 for z-scored series)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    h = ys.shape[1]
    persistence = np.repeat(xs[:, -1:], h, axis=1)
    mean_pred = np.full_like(ys, train_mean)
    return {"persistence": forecast_metrics(persistence, ys),
            "mean": forecast_metrics(mean_pred, ys)}


# ---------------------------------------------------------------------------
# distribution-shift statistic

def central_moments(X: np.ndarray, order: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    mu = X.mean(axis=0)
    if order == 1:
        return mu
    return ((X - mu) ** order).mean(axis=0)


def cmd_score(set_a: np.ndarray, set_b: np.ndarray, order: int = 3) -> float:
    """Central moment discrepancy between two embedding sets up to `order`."""
    A = np.asarray(set_a, dtype=float)
    B = np.asarray(set_b, dtype=float)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise AnalysisError(f"embedding sets must share dimension, got "
                            f"{A.shape} and {B.shape}")
    if len(A) == 0 or len(B) == 0:
        raise AnalysisError("empty embedding set")
    total = float(np.linalg.norm(central_moments(A, 1) - central_moments(B, 1)))
    for k in range(2, order + 1):
        total += float(np.linalg.norm(central_moments(A, k)
                                      - central_moments(B, k)))
    return total


# ---------------------------------------------------------------------------
# cluster separability

@dataclass
class ClusterStats:
    label: object
    centroid: np.ndarray
    spread: float  # mean distance to centroid
    size: int


def cluster_stats(embeddings: np.ndarray, labels: np.ndarray) -> list[ClusterStats]:
    embeddings = np.asarray(embeddings, dtype=float)
    labels = np.asarray(labels)
    stats = []
    for lab in sorted(set(labels.tolist())):
        pts = embeddings[labels == lab]
        mu = pts.mean(axis=0)
        stats.append(ClusterStats(label=lab, centroid=mu,
                                  spread=float(np.linalg.norm(pts - mu,
                                                              axis=1).mean()),
                                  size=len(pts)))
    return stats


def dbi_score(embeddings: np.ndarray, labels: np.ndarray) -> float:
    """Davies-Bouldin index over labeled embeddings; errors on coincident
    centroids (the ratio is undefined there)."""
    stats = cluster_stats(embeddings, labels)
    if len(stats) < 2:
        raise AnalysisError("need at least 2 clusters")
    K = len(stats)
    total = 0.0
    for i in range(K):
        worst = -np.inf
        for j in range(K):
            if i == j:
                continue
            sep = float(np.linalg.norm(stats[i].centroid - stats[j].centroid))
            if sep == 0.0:
                raise AnalysisError(
                    f"coincident centroids for clusters {stats[i].label!r} "
                    f"and {stats[j].label!r}")
            worst = max(worst, (stats[i].spread + stats[j].spread) / sep)
        total += worst
    return total / K


def dbi_pairwise(embeddings: np.ndarray, labels: np.ndarray):
    """DBI restricted to each pair of labels; returns (labels, matrix)."""
    uniq = sorted(set(np.asarray(labels).tolist()))
    n = len(uniq)
    out = np.full((n, n), np.nan)
    labels = np.asarray(labels)
    embeddings = np.asarray(embeddings, dtype=float)
    for i in range(n):
        for j in range(i + 1, n):
            sel = (labels == uniq[i]) | (labels == uniq[j])
            val = dbi_score(embeddings[sel], labels[sel])
            out[i, j] = out[j, i] = val
    return uniq, out


# ---------------------------------------------------------------------------
# rank correlation and prototype alignment

def _ranks(values: np.ndarray) -> np.ndarray:
    """Average ranks (ties shared), 1-based."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    """Rank correlation; NaN when either input is constant (undefined)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise AnalysisError("spearman expects two equal-length vectors")
    if np.all(a == a[0]) or np.all(b == b[0]):
        return float("nan")
    ra, rb = _ranks(a), _ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    return float((ra @ rb) / np.sqrt((ra @ ra) * (rb @ rb)))


def window_embeddings(model: CapeModel, series: np.ndarray, stride: int = 1,
                      batch_size: int = 64) -> np.ndarray:
    """Patch-mean of final-layer representations per sliding window."""
    T = model.config.T
    series = np.asarray(series, dtype=float)
    starts = list(range(0, len(series) - T + 1, stride))
    if not starts:
        raise AnalysisError(f"series shorter than T={T}")
    out = []
    for lo in range(0, len(starts), batch_size):
        chunk = starts[lo:lo + batch_size]
        x = np.stack([series[s:s + T] for s in chunk])
        final, _ = model.encode(x)
        out.append(final.data.mean(axis=1))
    return np.concatenate(out, axis=0)


@dataclass
class AlignmentReport:
    correlations: dict[str, float]          # compartment -> Spearman
    model_signals: dict[str, np.ndarray]    # per-window group-summed weights
    truth_signals: dict[str, np.ndarray]
    window_starts: np.ndarray
    group_mean_first_difference: dict[str, float]


def prototype_alignment_report(model: CapeModel, trajectory: Trajectory,
                               role_groups: dict[str, list[int]],
                               norm_state: tuple[float, float] | None = None,
                               stride: int = 1) -> AlignmentReport:
    """Compare group-summed final-layer mixture weights against the true
    compartment fractions over sliding windows.

    For each window the model signal is the patch-mean of the group's summed
    mixture weights; the matching truth signal is that compartment's mean
    fraction over the same steps. Correlations are Spearman; constant series
    yield NaN (reported, not raised).
    """
    cfg = model.config
    series = np.asarray(trajectory.observed, dtype=float)
    if norm_state is not None:
        mean, std = norm_state
        series = (series - mean) / std
    T = cfg.T
    starts = np.arange(0, len(series) - T + 1, stride)
    if len(starts) < 3:
        raise AnalysisError("trajectory too short for an alignment sweep")
    model_signals = {name: np.empty(len(starts)) for name in role_groups}
    truth_signals = {name: np.empty(len(starts)) for name in role_groups}
    first_diff_by_window = {name: np.empty(len(starts)) for name in role_groups}
    for w, s in enumerate(starts):
        x = series[s:s + T]
        _, mixtures = model.encode(x[None, :])
        pi = mixtures[-1].data[0]  # (C, K)
        for name, idxs in role_groups.items():
            group = pi[:, idxs].sum(axis=1)  # (C,)
            model_signals[name][w] = group.mean()
            first_diff_by_window[name][w] = np.diff(group).mean()
            truth = trajectory.compartment(name[0].upper()) if name[0].upper() \
                in "SIRD" else None
            if truth is None:
                raise AnalysisError(f"group {name!r} must start with S/I/R/D")
            truth_signals[name][w] = truth[s:s + T].mean()
    correlations = {name: spearman(model_signals[name], truth_signals[name])
                    for name in role_groups}
    gmfd = {name: float(first_diff_by_window[name].mean())
            for name in role_groups}
    return AlignmentReport(correlations=correlations,
                           model_signals=model_signals,
                           truth_signals=truth_signals,
                           window_starts=starts,
                           group_mean_first_difference=gmfd)
