"""Forecast accuracy metrics: MSE, MAE, SMAPE, MASE, OWA, seasonal naive.

SMAPE = (200 / n) * sum |y - x| / (|y| + |x|), zero-denominator terms
contribute 0.  MASE scales the mean absolute forecast error by the mean
seasonal-difference magnitude over the window's full span (history plus
prediction ground truth).  OWA averages the SMAPE and MASE ratios against
the seasonal-naive reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MetricUndefinedError, DataError


def mse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    d = pred - truth
    return float(np.mean(d * d))


def mae(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    return float(np.mean(np.abs(pred - truth)))


def smape(pred, truth) -> float:
    """Symmetric MAPE in [0, 200]; |y|+|x| == 0 terms count as 0."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.size == 0 or pred.shape != truth.shape:
        raise DataError(f"smape: bad shapes {pred.shape} vs {truth.shape}")
    denom = np.abs(pred) + np.abs(truth)
    terms = np.where(denom == 0.0, 0.0, np.abs(pred - truth) / np.where(denom == 0.0, 1.0, denom))
    return float(200.0 / pred.size * terms.sum())


def mase(pred, full_series, m: int) -> float:
    """Mean absolute scaled error over the last len(pred) points.

    ``full_series`` is the window's complete ground truth (history followed
    by the prediction span); the scaling term is the mean magnitude of its
    lag-m differences taken from index m+1 onward, normalized by (T - m).
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    full = np.asarray(full_series, dtype=np.float64).reshape(-1)
    h = pred.size
    t_total = full.size
    history = t_total - h
    if m < 1:
        raise DataError(f"mase: periodicity must be >= 1, got {m}")
    if history <= m:
        raise DataError(f"mase: history length {history} must exceed periodicity {m}")
    numerator = float(np.mean(np.abs(pred - full[history:])))
    seasonal = np.abs(full[m + 1:] - full[1:t_total - m])
    denom = float(seasonal.sum() / (t_total - m))
    if denom == 0.0:
        raise MetricUndefinedError("mase undefined: seasonal differences are all zero")
    return numerator / denom


def naive2_forecast(history, m: int, horizon: int) -> np.ndarray:
    """Seasonal-naive continuation: repeat the last m observations."""
    history = np.asarray(history, dtype=np.float64).reshape(-1)
    if m < 1:
        raise DataError(f"naive2: periodicity must be >= 1, got {m}")
    if history.size < m:
        raise DataError(f"naive2: history length {history.size} shorter than periodicity {m}")
    tail = history[history.size - m:]
    return tail[np.arange(horizon) % m]


@dataclass
class MetricsReport:
    mse: float
    mae: float
    smape: float
    mase: float | None
    owa: float | None
    n_windows: int
    label: str = ""


def owa(model_report: MetricsReport, naive_report: MetricsReport) -> float:
    """0.5 * (SMAPE ratio + MASE ratio) against the seasonal-naive run."""
    if model_report.mase is None or naive_report.mase is None:
        raise MetricUndefinedError("owa needs MASE on both reports (periodicity missing)")
    if naive_report.smape == 0.0 or naive_report.mase == 0.0:
        raise MetricUndefinedError("owa undefined: naive reference metric is zero")
    return 0.5 * (model_report.smape / naive_report.smape
                  + model_report.mase / naive_report.mase)
