"""Clinical utility costs: normal-range, trend and trend-deviation.

Scalar functions mirror the per-point definitions; the ``*_arrays`` helpers
compute the same quantities over whole series for aggregation and training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .core import (
    EmptyAlignment,
    MetricError,
    NormalRangeParams,
    TrendParams,
    VitalSeries,
    align,
)


class TooFewPoints(MetricError):
    pass


class InsufficientHistory(MetricError):
    pass


class InsufficientHorizon(MetricError):
    pass


@dataclass(frozen=True)
class TrendTriple:
    expected_trend: float
    actual_trend: float
    predicted_trend: float

    def __post_init__(self):
        if not np.all(np.isfinite([self.expected_trend, self.actual_trend, self.predicted_trend])):
            raise ValueError("trend values must be finite")


@dataclass(frozen=True)
class UtilityBreakdown:
    """Mean utility costs; a mean is ``None`` when its component had no evaluable point."""

    mean_range_cost: float | None
    mean_trend_cost: float | None
    mean_trend_dev_cost: float | None
    range_count: int
    trend_count: int
    trend_dev_count: int

    @staticmethod
    def pooled(parts: Sequence["UtilityBreakdown"]) -> "UtilityBreakdown":
        """Point-weighted combination of several breakdowns."""

        def pool(means, counts):
            total = sum(counts)
            if total == 0:
                return None, 0
            return sum(m * c for m, c in zip(means, counts) if c) / total, total

        r, rc = pool([p.mean_range_cost for p in parts], [p.range_count for p in parts])
        t, tc = pool([p.mean_trend_cost for p in parts], [p.trend_count for p in parts])
        d, dc = pool([p.mean_trend_dev_cost for p in parts], [p.trend_dev_count for p in parts])
        return UtilityBreakdown(r, t, d, rc, tc, dc)


def _sign(x):
    return np.sign(x)


# --- normal range -----------------------------------------------------------

def two_sided_sigmoid(value, params: NormalRangeParams):
    """Importance curve: ~0 inside [l, h], rising to L beyond either threshold.

    The high-side sigmoid uses exponent -k_h*(v-h) and the low side +k_l*(v-l)
    so both rise away from the normal band. The clamps at 0 are kept even
    though they never bind for positive L.
    """
    v = np.asarray(value, dtype=np.float64)
    L = params.amplitude_L
    high = np.maximum(L * expit(params.steepness_high_k_h * (v - params.high_threshold_h)), 0.0)
    low = np.maximum(L * expit(-params.steepness_low_k_l * (v - params.low_threshold_l)), 0.0)
    out = high + low
    return float(out) if out.ndim == 0 else out


def two_sided_sigmoid_derivative(value, params: NormalRangeParams):
    v = np.asarray(value, dtype=np.float64)
    L = params.amplitude_L
    sh = expit(params.steepness_high_k_h * (v - params.high_threshold_h))
    sl = expit(-params.steepness_low_k_l * (v - params.low_threshold_l))
    out = L * params.steepness_high_k_h * sh * (1 - sh) - L * params.steepness_low_k_l * sl * (1 - sl)
    return float(out) if out.ndim == 0 else out


def normal_range_cost(y, y_hat, params: NormalRangeParams):
    out = np.abs(np.asarray(two_sided_sigmoid(y, params)) - np.asarray(two_sided_sigmoid(y_hat, params)))
    return float(out) if out.ndim == 0 else out


def range_cost_subgradient(y, y_hat, params: NormalRangeParams):
    """d/d(y_hat) of the normal range cost; 0 where the two curve values coincide."""
    diff = np.asarray(two_sided_sigmoid(y_hat, params)) - np.asarray(two_sided_sigmoid(y, params))
    out = _sign(diff) * np.asarray(two_sided_sigmoid_derivative(y_hat, params))
    return float(out) if out.ndim == 0 else out


# --- trends -----------------------------------------------------------------

def ols_weights(length: int) -> np.ndarray:
    """Coefficients c such that slope = c @ values for equally spaced points."""
    if length < 2:
        raise TooFewPoints("a slope needs at least two points")
    x = np.arange(length, dtype=np.float64)
    xc = x - x.mean()
    return xc / np.dot(xc, xc)


def ols_slope(values: Sequence[float]) -> float:
    vals = np.asarray(values, dtype=np.float64)
    # Weights sum to zero, so shifting by a constant is free and makes flat input exactly 0.
    return float(ols_weights(vals.size) @ (vals - vals[0]))


def trend_triple(truth: VitalSeries, prediction: VitalSeries, t: int, params: TrendParams) -> TrendTriple:
    n, m = params.lookback_n, params.horizon_m
    history = np.array([truth.value_at(i) for i in range(t - n, t + 1)])
    future = np.array([truth.value_at(i) for i in range(t + 1, t + m + 1)])
    predicted = np.array([prediction.value_at(i) for i in range(t + 1, t + m + 1)])
    if t - n < 0 or np.isnan(history).any():
        raise InsufficientHistory(f"missing truth in [{t - n}, {t}]")
    if np.isnan(future).any() or np.isnan(predicted).any():
        raise InsufficientHorizon(f"missing truth or prediction in [{t + 1}, {t + m}]")
    return TrendTriple(
        expected_trend=ols_slope(history),
        actual_trend=ols_slope(np.concatenate([history, future])),
        predicted_trend=ols_slope(np.concatenate([history, predicted])),
    )


def trend_cost(triple: TrendTriple, params: TrendParams) -> float:
    over = max(triple.predicted_trend - triple.actual_trend, 0.0)
    under = max(triple.actual_trend - triple.predicted_trend, 0.0)
    return over ** 2 * params.weight_over_w_l + under ** 2 * params.weight_under_w_h


def trend_deviation_cost(triple: TrendTriple, y: float, y_hat: float) -> float:
    return (triple.expected_trend - triple.actual_trend) ** 2 * abs(y - y_hat)


def predicted_slope_weights(params: TrendParams) -> np.ndarray:
    """OLS coefficients of the m predicted points inside the predicted-trend window."""
    return ols_weights(params.lookback_n + params.horizon_m + 1)[params.lookback_n + 1:]


def trend_cost_gradient(triple: TrendTriple, params: TrendParams, slope_weights=None) -> np.ndarray:
    if slope_weights is None:
        slope_weights = predicted_slope_weights(params)
    gap = triple.predicted_trend - triple.actual_trend
    outer = 2 * max(gap, 0.0) * params.weight_over_w_l - 2 * max(-gap, 0.0) * params.weight_under_w_h
    return outer * np.asarray(slope_weights, dtype=np.float64)


def trend_dev_cost_subgradient(triple: TrendTriple, y: float, y_hat: float) -> float:
    return float(-((triple.expected_trend - triple.actual_trend) ** 2) * np.sign(y - y_hat))


# --- whole-series helpers ---------------------------------------------------

@dataclass(frozen=True)
class TrendArrays:
    """Per-anchor trend terms on a dense grid; NaN where the window is incomplete.

    ``gap`` is predicted minus actual trend, computed from the prediction
    errors directly so that it is exactly 0 for a perfect prediction.
    """

    expected: np.ndarray
    actual: np.ndarray
    gap: np.ndarray
    valid: np.ndarray

    @property
    def predicted(self) -> np.ndarray:
        return self.actual + self.gap


def trend_arrays(y: np.ndarray, y_hat: np.ndarray, params: TrendParams) -> TrendArrays:
    """Trend terms at every anchor of dense, equally indexed truth/prediction arrays."""
    n, m = params.lookback_n, params.horizon_m
    size = y.size
    width = n + m + 1
    expected = np.full(size, np.nan)
    actual = np.full(size, np.nan)
    gap = np.full(size, np.nan)
    valid = np.zeros(size, dtype=bool)
    if size < width:
        return TrendArrays(expected, actual, gap, valid)
    full_w = ols_weights(width)
    hist_w = ols_weights(n + 1)
    y_win = sliding_window_view(y, width)
    p_win = sliding_window_view(y_hat, width)[:, n + 1:]
    ok = ~np.isnan(y_win).any(axis=1) & ~np.isnan(p_win).any(axis=1)
    anchors = np.arange(n, size - m)[ok]
    y_ok = y_win[ok]
    expected[anchors] = y_ok[:, : n + 1] @ hist_w
    actual[anchors] = y_ok @ full_w
    gap[anchors] = (p_win[ok] - y_ok[:, n + 1:]) @ full_w[n + 1:]
    valid[anchors] = True
    return TrendArrays(expected, actual, gap, valid)


@dataclass(frozen=True)
class PointwiseCosts:
    """Per-index costs on the grid ``start..start+len-1``; NaN where not computed."""

    start: int
    range_cost: np.ndarray
    trend_cost: np.ndarray
    trend_dev_cost: np.ndarray

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.start, self.start + self.range_cost.size)

    def window(self, start: int, end: int) -> dict[str, np.ndarray]:
        lo = max(start - self.start, 0)
        hi = max(end - self.start + 1, 0)
        return {"range": self.range_cost[lo:hi], "trend": self.trend_cost[lo:hi],
                "trend_dev": self.trend_dev_cost[lo:hi]}

    def breakdown(self) -> "UtilityBreakdown":
        r, rc = _mean_or_none(self.range_cost)
        t, tc = _mean_or_none(self.trend_cost)
        d, dc = _mean_or_none(self.trend_dev_cost)
        return UtilityBreakdown(r, t, d, rc, tc, dc)


def _dense_pair(truth: VitalSeries, prediction: VitalSeries):
    pair = align(truth, prediction)
    if pair.empty:
        raise EmptyAlignment(f"{truth.patient_id}/{truth.signal_name}: no common observed indices")
    start = int(min(truth.indices[0], prediction.indices[0]))
    stop = int(max(truth.indices[-1], prediction.indices[-1])) + 1
    return start, truth.dense(start, stop), prediction.dense(start, stop)


def dense_costs(y: np.ndarray, y_hat: np.ndarray, range_params: NormalRangeParams,
                trend_params: TrendParams):
    both = ~np.isnan(y) & ~np.isnan(y_hat)
    rc = np.full(y.size, np.nan)
    rc[both] = normal_range_cost(y[both], y_hat[both], range_params)
    tr = trend_arrays(y, y_hat, trend_params)
    tc = np.full(y.size, np.nan)
    gap = tr.gap[tr.valid]
    tc[tr.valid] = (np.maximum(gap, 0) ** 2 * trend_params.weight_over_w_l
                    + np.maximum(-gap, 0) ** 2 * trend_params.weight_under_w_h)
    dev_ok = tr.valid & both
    dc = np.full(y.size, np.nan)
    dc[dev_ok] = (tr.expected[dev_ok] - tr.actual[dev_ok]) ** 2 * np.abs(y[dev_ok] - y_hat[dev_ok])
    return rc, tc, dc


def pointwise_costs(truth: VitalSeries, prediction: VitalSeries, range_params: NormalRangeParams,
                    trend_params: TrendParams) -> PointwiseCosts:
    start, y, p = _dense_pair(truth, prediction)
    rc, tc, dc = dense_costs(y, p, range_params, trend_params)
    return PointwiseCosts(start, rc, tc, dc)


def _mean_or_none(arr: np.ndarray):
    vals = arr[~np.isnan(arr)]
    return (float(vals.mean()) if vals.size else None), int(vals.size)


def aggregate(truth: VitalSeries, prediction: VitalSeries, range_params: NormalRangeParams,
              trend_params: TrendParams) -> UtilityBreakdown:
    return pointwise_costs(truth, prediction, range_params, trend_params).breakdown()


# Illustrative parameter sets; the clinical values come from interview-derived
# curves that are not tabulated, so treat these as configurable defaults.
HEART_RATE_RANGE = NormalRangeParams(1.0, 0.5, 0.5, 60.0, 100.0)
MEAN_BP_RANGE = NormalRangeParams(1.0, 0.5, 0.5, 65.0, 110.0)
# Simulated target s3 spends most of its time in roughly [0, 16].
SIMULATION_RANGE = NormalRangeParams(1.0, 1.0, 1.0, 0.0, 16.0)
