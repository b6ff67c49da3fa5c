"""Forecast error metrics and cluster purity."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass
class ForecastMetrics:
    mae: float
    rmse: float
    mape: float
    mape_excluded: int

    def as_tuple(self):
        return self.mae, self.rmse, self.mape


def forecast_metrics(pred: np.ndarray, truth: np.ndarray, eps: float = 1e-3) -> ForecastMetrics:
    """MAE, RMSE and MAPE; MAPE skips targets with ``|y| < eps`` and reports how many."""
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    err = pred - truth
    keep = np.abs(truth) >= eps
    mape = float(np.mean(np.abs(err[keep]) / np.abs(truth[keep]))) if keep.any() else float("nan")
    return ForecastMetrics(float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err ** 2))),
                           mape, int((~keep).sum()))


def cluster_purity(pred: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of items whose predicted cluster maps to their true label under
    the best one-to-one label matching (Hungarian assignment)."""
    pred, truth = np.asarray(pred, int), np.asarray(truth, int)
    if pred.shape != truth.shape:
        raise ValueError("pred and truth must have the same shape")
    p_ids, p_idx = np.unique(pred, return_inverse=True)
    t_ids, t_idx = np.unique(truth, return_inverse=True)
    overlap = np.zeros((p_ids.size, t_ids.size))
    np.add.at(overlap, (p_idx, t_idx), 1)
    rows, cols = linear_sum_assignment(-overlap)
    return float(overlap[rows, cols].sum() / pred.size)


def region_assignments(dist: np.ndarray) -> np.ndarray:
    """Per-region cluster from (N, H_S, R, T) cluster distributions: the argmax
    of the distribution averaged over windows and time slots."""
    return np.asarray(dist).mean(axis=(0, 3)).argmax(axis=0)
