"""Anomaly scoring, rank-based AUROC, epoch curves and sweep tables.

Scores are squared latent distances to the hypersphere center (higher
means more anomalous); the plain autoencoder baseline scores by squared
reconstruction error instead, since it has no hypersphere branch.
AUROC is the Mann-Whitney statistic with average ranks on ties.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ContractError, Rng
from .data import LabeledDataset
from .models import ModelParams, forward
from .losses import HypersphereState

EVAL_BATCH = 256


@dataclass
class ScoredBatch:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ContractError("scores and labels must be matching vectors")
        if not np.all(np.isfinite(self.scores)):
            raise ContractError("scores must be finite")


@dataclass
class AurocReport:
    auroc: float
    n_pos: int
    n_neg: int
    tie_count: int  # cross-class tied score pairs, counted half each


def score(model: ModelParams, hs: HypersphereState | None,
          batch: LabeledDataset) -> ScoredBatch:
    """Score a dataset in eval mode (running batch-norm statistics).

    Distance scoring needs the hypersphere state; reconstruction scoring
    (plain autoencoder) ignores it.
    """
    kind = model.variant.score_kind
    if kind == "distance" and hs is None:
        raise ContractError("distance scoring needs the hypersphere state")
    scores = np.empty(len(batch), dtype=np.float64)
    for start in range(0, len(batch), EVAL_BATCH):
        sl = slice(start, min(start + EVAL_BATCH, len(batch)))
        out = forward(batch.samples[sl], model, mode="eval")
        if kind == "distance":
            diff = out.z_hat.data.astype(np.float64) - hs.center
            scores[sl] = (diff * diff).sum(axis=1)
        else:
            diff = out.x_hat.data.astype(np.float64) - batch.samples[sl]
            scores[sl] = (diff * diff).reshape(diff.shape[0], -1).sum(axis=1)
    return ScoredBatch(scores=scores, labels=batch.labels)


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(sb: ScoredBatch) -> AurocReport:
    """Rank-based AUROC: P(anomaly scores above normal), ties half."""
    pos = sb.labels == 1
    n_pos = int(pos.sum())
    n_neg = len(sb.labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError(
            f"AUROC undefined with {n_pos} positives and {n_neg} negatives"
        )
    ranks = average_ranks(sb.scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    value = u / (n_pos * n_neg)

    ties = 0
    vals, counts = np.unique(sb.scores, return_counts=True)
    for v, c in zip(vals, counts):
        if c > 1:
            p = int((sb.scores[pos] == v).sum())
            ties += p * (c - p)
    return AurocReport(auroc=float(value), n_pos=n_pos, n_neg=n_neg, tie_count=ties)


def spearman(x, y) -> float:
    """Rank correlation; 0.0 when either vector is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rx, ry = average_ranks(x), average_ranks(y)
    sx, sy = rx.std(), ry.std()
    if sx == 0.0 or sy == 0.0:
        return 0.0
    return float(((rx - rx.mean()) * (ry - ry.mean())).mean() / (sx * sy))


# ---------------------------------------------------------------------------
# reports

def epoch_curve(aurocs, stability_window: int = 10):
    """(epoch, auroc) rows plus the steady-state stability metric
    (stddev of the last ``stability_window`` entries; None if only one
    epoch was recorded)."""
    aurocs = [float(a) for a in aurocs]
    if not aurocs:
        raise ContractError("no epochs recorded")
    rows = [(i + 1, a) for i, a in enumerate(aurocs)]
    stability = None
    if len(aurocs) > 1:
        stability = float(np.std(aurocs[-stability_window:]))
    return rows, stability


def write_epoch_curve_csv(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "auroc"])
        for epoch, value in rows:
            writer.writerow([epoch, repr(float(value))])


def write_auroc_by_class_csv(path, rows):
    """rows: (class_label, variant, boundary, auroc) tuples."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "variant", "boundary", "auroc"])
        for cls, variant, boundary, value in rows:
            writer.writerow([cls, variant, boundary, repr(float(value))])


def contamination_table(results: dict) -> list[tuple]:
    """Aggregate {(variant, rho, seed): auroc} into mean rows sorted by
    (variant, rho): (variant, rho, mean_auroc, n_seeds)."""
    acc: dict[tuple, list] = {}
    for (variant, rho, _seed), value in results.items():
        acc.setdefault((variant, float(rho)), []).append(float(value))
    return [
        (variant, rho, float(np.mean(vals)), len(vals))
        for (variant, rho), vals in sorted(acc.items())
    ]


def write_sweep_csv(path, table):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "rho", "mean_auroc", "n_seeds"])
        for variant, rho, mean_auroc, n in table:
            writer.writerow([variant, repr(float(rho)), repr(float(mean_auroc)), n])


def write_sweep_dat(path, table):
    """Whitespace-separated data file (gnuplot friendly), one block per
    variant separated by blank lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# variant rho mean_auroc n_seeds"]
    last_variant = None
    for variant, rho, mean_auroc, n in table:
        if last_variant is not None and variant != last_variant:
            lines.append("")
        lines.append(f"{variant} {rho!r} {mean_auroc!r} {n}")
        last_variant = variant
    path.write_text("\n".join(lines) + "\n")
