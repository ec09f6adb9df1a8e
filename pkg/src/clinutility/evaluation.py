"""Model evaluation: overall RMSE, utility costs, event-window RMSE, rankings and paired tests."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import (
    EmptyAlignment,
    EmptyWindow,
    EventAnnotation,
    NormalRangeParams,
    PredictionSeries,
    TrendParams,
    VitalSeries,
    align,
    index_series,
    series_key,
    squared_errors_in,
    window_rmse,
)
from .stats import DegenerateInput, paired_t_test, spearman
from .utility import UtilityBreakdown, pointwise_costs

CRITERIA = ("rmse", "range", "trend", "trend_dev")
# Event type whose window RMSE corresponds to each utility cost.
EVENT_FOR_COST = {"range": "range", "trend": "trend", "trend_dev": "surge"}


class EvaluationError(ValueError):
    pass


class MissingMetric(EvaluationError):
    pass


@dataclass(frozen=True)
class EventTypeStats:
    """Window RMSE for one event type, plus each utility cost averaged inside the same windows."""

    mean_rmse: float
    count: int
    costs: dict[str, float | None] = field(default_factory=dict)


@dataclass(frozen=True)
class EvaluationReport:
    model_id: str
    overall_rmse: float
    utility: UtilityBreakdown
    per_event_type: dict[str, EventTypeStats] = field(default_factory=dict)
    skipped_windows: int = 0
    skipped_series: int = 0
    n_points: int = 0

    def metric(self, criterion: str) -> float:
        if criterion == "rmse":
            return self.overall_rmse
        if criterion == "range":
            value = self.utility.mean_range_cost
        elif criterion == "trend":
            value = self.utility.mean_trend_cost
        elif criterion == "trend_dev":
            value = self.utility.mean_trend_dev_cost
        elif criterion.startswith("window_rmse:"):
            stats = self.per_event_type.get(criterion.split(":", 1)[1])
            value = None if stats is None else stats.mean_rmse
        elif criterion.startswith("window_") and ":" in criterion:
            cost, kind = criterion[len("window_"):].split(":", 1)
            stats = self.per_event_type.get(kind)
            value = None if stats is None else stats.costs.get(cost)
        else:
            raise ValueError(f"unknown criterion {criterion!r}")
        if value is None:
            raise MissingMetric(f"{self.model_id} has no value for {criterion}")
        return value

    def metrics(self) -> dict[str, float | None]:
        out = {"overall_rmse": self.overall_rmse,
               "range": self.utility.mean_range_cost,
               "trend": self.utility.mean_trend_cost,
               "trend_dev": self.utility.mean_trend_dev_cost}
        for kind, stats in sorted(self.per_event_type.items()):
            out[f"window_rmse:{kind}"] = stats.mean_rmse
            for cost in ("range", "trend", "trend_dev"):
                out[f"window_{cost}:{kind}"] = stats.costs.get(cost)
        return out


def _match(truth: Iterable[VitalSeries], predictions: Iterable[PredictionSeries]):
    truth_map = index_series(truth) if not isinstance(truth, Mapping) else dict(truth)
    pairs = []
    for pred in predictions:
        key = series_key(pred)
        if key not in truth_map:
            raise EvaluationError(f"no truth series for {key}")
        pairs.append(align(truth_map[key], pred))
    return truth_map, pairs


def evaluate(truth: Iterable[VitalSeries] | Mapping, predictions: Sequence[PredictionSeries],
             annotations: Sequence[EventAnnotation], range_params: NormalRangeParams,
             trend_params: TrendParams, pooling: str = "event", model_id: str | None = None) -> EvaluationReport:
    """Evaluate one model's predictions against truth.

    ``pooling="event"`` averages per-event window RMSEs (each event counts once);
    ``pooling="point"`` pools squared errors over all windows of a type.
    """
    if pooling not in ("event", "point"):
        raise ValueError("pooling must be 'event' or 'point'")
    preds = sorted(predictions, key=series_key)
    truth_map, pairs = _match(truth, preds)
    sq_sum, n_points, skipped = 0.0, 0, 0
    breakdowns = []
    by_key, cost_by_key = {}, {}
    for pred, pair in zip(preds, pairs):
        if pair.empty:
            skipped += 1
            continue
        by_key[series_key(pred)] = pair
        err = pair.y - pair.y_hat
        sq_sum += float(err @ err)
        n_points += err.size
        costs = pointwise_costs(truth_map[series_key(pred)], pred, range_params, trend_params)
        cost_by_key[series_key(pred)] = costs
        breakdowns.append(costs.breakdown())
    if not by_key:
        raise EmptyAlignment("every series was skipped")
    windows: dict[str, list[float]] = defaultdict(list)
    pooled: dict[str, list[float]] = defaultdict(lambda: [0.0, 0])
    window_costs: dict[str, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    skipped_windows = 0
    for event in sorted(annotations, key=lambda e: (e.patient_id, e.signal_name, e.start_index, e.end_index, e.event_type)):
        pair = by_key.get((event.patient_id, event.signal_name))
        if pair is None:
            continue
        try:
            windows[event.event_type].append(window_rmse(pair, event))
        except EmptyWindow:
            skipped_windows += 1
            continue
        sq = squared_errors_in(pair, event.start_index, event.end_index)
        pooled[event.event_type][0] += float(sq.sum())
        pooled[event.event_type][1] += sq.size
        inside = cost_by_key[(event.patient_id, event.signal_name)].window(event.start_index, event.end_index)
        for cost, vals in inside.items():
            vals = vals[~np.isnan(vals)]
            if vals.size:
                window_costs[event.event_type][cost].append(float(vals.mean()))
    per_type = {}
    for kind in sorted(windows):
        costs = {cost: (float(np.mean(window_costs[kind][cost])) if window_costs[kind][cost] else None)
                 for cost in ("range", "trend", "trend_dev")}
        if pooling == "event":
            value = float(np.mean(windows[kind]))
        else:
            s, c = pooled[kind]
            value = math.sqrt(s / c)
        per_type[kind] = EventTypeStats(value, len(windows[kind]), costs)
    name = model_id or (preds[0].model_id if preds else "model")
    return EvaluationReport(name, math.sqrt(sq_sum / n_points), UtilityBreakdown.pooled(breakdowns),
                            per_type, skipped_windows, skipped, n_points)


def rank_models(reports: Sequence[EvaluationReport], criterion: str) -> list[str]:
    """Model ids ascending by the chosen cost, ties broken by id."""
    if not reports:
        raise ValueError("need at least one report")
    keyed = [(r.metric(criterion), r.model_id) for r in reports]
    return [mid for _, mid in sorted(keyed)]


def summarize_reports(reports: Sequence[EvaluationReport]) -> dict[str, tuple[float, float]]:
    """Mean and sample standard deviation of each metric across reports (e.g. CV folds)."""
    values: dict[str, list[float]] = defaultdict(list)
    for r in reports:
        for key, val in r.metrics().items():
            if val is not None:
                values[key].append(val)
    out = {}
    for key in sorted(values):
        arr = np.asarray(values[key])
        out[key] = (float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0)
    return out


@dataclass(frozen=True)
class PairedComparison:
    model_a: str
    model_b: str
    events: list[EventAnnotation]
    rmse_a: np.ndarray
    rmse_b: np.ndarray
    t_statistic: float
    p_value: float

    @property
    def differences(self) -> np.ndarray:
        return self.rmse_b - self.rmse_a

    @property
    def n_events(self) -> int:
        return len(self.events)


def compare_on_events(truth, predictions_a: Sequence[PredictionSeries], predictions_b: Sequence[PredictionSeries],
                      annotations: Sequence[EventAnnotation]) -> PairedComparison:
    """Paired t-test of window RMSE (B minus A) over events both models cover."""
    truth_map, pairs_a = _match(truth, predictions_a)
    _, pairs_b = _match(truth_map, predictions_b)
    a_by = {series_key(p.prediction): p for p in pairs_a}
    b_by = {series_key(p.prediction): p for p in pairs_b}
    used, ra, rb = [], [], []
    for event in annotations:
        key = (event.patient_id, event.signal_name)
        if key not in a_by or key not in b_by:
            continue
        try:
            va, vb = window_rmse(a_by[key], event), window_rmse(b_by[key], event)
        except EmptyWindow:
            continue
        used.append(event)
        ra.append(va)
        rb.append(vb)
    ra, rb = np.array(ra), np.array(rb)
    t, p = paired_t_test(rb - ra)
    name_a = predictions_a[0].model_id if predictions_a else "a"
    name_b = predictions_b[0].model_id if predictions_b else "b"
    return PairedComparison(name_a, name_b, used, ra, rb, t, p)


def cost_rank_correlations(reports: Sequence[EvaluationReport], within_windows: bool = True) -> dict[str, float | None]:
    """Spearman correlation across models between each utility cost and its event-window RMSE.

    With ``within_windows`` the cost is the one measured inside that event type's
    windows; otherwise the whole-series mean is used.
    """
    out = {}
    for cost, event_type in EVENT_FOR_COST.items():
        try:
            xs = [r.metric(f"window_rmse:{event_type}") for r in reports]
            key = f"window_{cost}:{event_type}" if within_windows else cost
            ys = [r.metric(key) for r in reports]
            out[cost] = spearman(xs, ys)
        except (MissingMetric, DegenerateInput):
            out[cost] = None
    return out
