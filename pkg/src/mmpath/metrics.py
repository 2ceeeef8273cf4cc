"""Regression and rank-correlation metrics for the downstream tasks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Metrics:
    mae: float
    mare: float
    mape: float
    kendall_tau: float
    spearman_rho: float
    n: int
    mape_excluded: int = 0


def mae(pred, truth) -> float:
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    return float(np.mean(np.abs(pred - truth)))


def mare(pred, truth) -> float:
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    return float(np.sum(np.abs(pred - truth)) / np.sum(np.abs(truth)))


def mape(pred, truth) -> tuple[float, int]:
    """Percent error over nonzero labels; returns (mape, number of excluded zero labels)."""
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    keep = truth != 0
    excluded = int((~keep).sum())
    if excluded:
        log.warning("MAPE: excluded %d zero-valued labels", excluded)
    if not keep.any():
        return math.nan, excluded
    return float(100.0 * np.mean(np.abs(pred[keep] - truth[keep]) / np.abs(truth[keep]))), excluded


def pair_counts(x, y) -> tuple[int, int, int, int]:
    """(concordant, discordant, ties only in x, ties only in y) over all pairs."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    i, j = np.triu_indices(len(x), k=1)
    sx, sy = np.sign(x[i] - x[j]), np.sign(y[i] - y[j])
    prod = sx * sy
    return (int((prod > 0).sum()), int((prod < 0).sum()),
            int(((sx == 0) & (sy != 0)).sum()), int(((sy == 0) & (sx != 0)).sum()))


def kendall_tau(x, y) -> float:
    """Tau-b: (C - D) / sqrt((C + D + Tx)(C + D + Ty)); NaN if either side is constant."""
    c, d, tx, ty = pair_counts(x, y)
    denom = (c + d + tx) * (c + d + ty)
    return float((c - d) / math.sqrt(denom)) if denom > 0 else math.nan


def average_ranks(x) -> np.ndarray:
    x = np.asarray(x, float)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), float)
    sx = x[order]
    start = 0
    for end in range(1, len(x) + 1):
        if end == len(x) or sx[end] != sx[start]:
            ranks[order[start:end]] = (start + end + 1) / 2.0
            start = end
    return ranks


def pearson(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(np.sum(da * da)) * float(np.sum(db * db)))
    return float(np.sum(da * db) / denom) if denom > 0 else math.nan


def spearman_rho(x, y) -> float:
    return pearson(average_ranks(x), average_ranks(y))


def compute_metrics(pred, truth) -> Metrics:
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    if len(truth) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    p, excluded = mape(pred, truth)
    return Metrics(mae(pred, truth), mare(pred, truth), p, kendall_tau(truth, pred),
                   spearman_rho(truth, pred), len(truth), excluded)
