"""Shared domain types: vital-sign series, alignment, event windows and metric parameters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

EVENT_TYPES = ("sudden_drop", "surge", "trend", "range", "annotated")


class MetricError(ValueError):
    """Base class for metric-level input errors."""


class MismatchedIdentity(MetricError):
    pass


class EmptyAlignment(MetricError):
    pass


class EmptyWindow(MetricError):
    pass


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class VitalSeries:
    """One patient's signal on an integer step grid.

    Missing values are stored as NaN; they are never imputed here.
    """

    patient_id: str
    signal_name: str
    indices: np.ndarray
    values: np.ndarray
    step_seconds: float = 1.0

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.int64).reshape(-1)
        vals = np.array(self.values, dtype=np.float64).reshape(-1)
        if idx.shape != vals.shape:
            raise ValueError("indices and values must have the same length")
        if idx.size and idx[0] < 0:
            raise ValueError("indices must be non-negative")
        if idx.size > 1 and np.any(np.diff(idx) <= 0):
            raise ValueError("indices must be strictly increasing")
        if not self.step_seconds > 0:
            raise ValueError("step_seconds must be positive")
        if np.any(np.isinf(vals)):
            raise ValueError("values must be finite or missing (NaN)")
        object.__setattr__(self, "patient_id", str(self.patient_id))
        object.__setattr__(self, "indices", _frozen(idx))
        object.__setattr__(self, "values", _frozen(vals))

    @classmethod
    def from_values(cls, patient_id, signal_name, values, start=0, step_seconds=1.0, **kw):
        values = np.asarray(values, dtype=np.float64)
        return cls(patient_id, signal_name, np.arange(start, start + values.size), values,
                   step_seconds, **kw)

    def __len__(self) -> int:
        return int(self.indices.size)

    @property
    def observed(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def dense(self, start: int | None = None, stop: int | None = None) -> np.ndarray:
        """Values on the contiguous grid ``start..stop-1`` with NaN where absent."""
        if start is None:
            start = int(self.indices[0]) if len(self) else 0
        if stop is None:
            stop = int(self.indices[-1]) + 1 if len(self) else start
        out = np.full(max(stop - start, 0), np.nan)
        keep = (self.indices >= start) & (self.indices < stop)
        out[self.indices[keep] - start] = self.values[keep]
        return out

    def value_at(self, index: int) -> float:
        pos = np.searchsorted(self.indices, index)
        if pos < len(self) and self.indices[pos] == index:
            return float(self.values[pos])
        return float("nan")

    def equals(self, other: "VitalSeries") -> bool:
        return (
            type(self) is type(other)
            and self.patient_id == other.patient_id
            and self.signal_name == other.signal_name
            and self.step_seconds == other.step_seconds
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values, equal_nan=True)
        )


@dataclass(frozen=True, eq=False)
class PredictionSeries(VitalSeries):
    model_id: str = "model"

    def equals(self, other) -> bool:
        return super().equals(other) and self.model_id == other.model_id


@dataclass(frozen=True)
class NormalRangeParams:
    """Two-sided sigmoid parameters: plateau height, low/high steepness and thresholds."""

    amplitude_L: float
    steepness_low_k_l: float
    steepness_high_k_h: float
    low_threshold_l: float
    high_threshold_h: float

    def __post_init__(self):
        if not self.low_threshold_l < self.high_threshold_h:
            raise ValueError("low threshold must be below high threshold")
        if not self.amplitude_L > 0:
            raise ValueError("amplitude_L must be positive")
        if not (self.steepness_low_k_l > 0 and self.steepness_high_k_h > 0):
            raise ValueError("steepness values must be positive")


@dataclass(frozen=True)
class TrendParams:
    lookback_n: int = 3
    horizon_m: int = 2
    weight_over_w_l: float = 1.0
    weight_under_w_h: float = 1.0

    def __post_init__(self):
        if int(self.lookback_n) != self.lookback_n or self.lookback_n < 2:
            raise ValueError("lookback_n must be an integer >= 2")
        if int(self.horizon_m) != self.horizon_m or self.horizon_m < 1:
            raise ValueError("horizon_m must be an integer >= 1")
        if self.weight_over_w_l < 0 or self.weight_under_w_h < 0:
            raise ValueError("trend weights must be non-negative")
        if self.weight_over_w_l == 0 and self.weight_under_w_h == 0:
            raise ValueError("trend weights cannot both be zero")


@dataclass(frozen=True)
class EventAnnotation:
    patient_id: str
    signal_name: str
    start_index: int
    end_index: int
    event_type: str

    def __post_init__(self):
        object.__setattr__(self, "patient_id", str(self.patient_id))
        if self.start_index > self.end_index:
            raise ValueError("start_index must not exceed end_index")
        if self.event_type not in EVENT_TYPES:
            raise ValueError(f"unknown event type {self.event_type!r}")

    @property
    def length(self) -> int:
        return self.end_index - self.start_index + 1


@dataclass(frozen=True, eq=False)
class AlignedPair:
    truth: VitalSeries
    prediction: PredictionSeries
    indices: np.ndarray
    y: np.ndarray = field(repr=False)
    y_hat: np.ndarray = field(repr=False)

    @property
    def empty(self) -> bool:
        return self.indices.size == 0


def align(truth: VitalSeries, prediction: VitalSeries) -> AlignedPair:
    """Pair truth and prediction on the indices where both are observed."""
    if truth.patient_id != prediction.patient_id or truth.signal_name != prediction.signal_name:
        raise MismatchedIdentity(
            f"cannot align {truth.patient_id}/{truth.signal_name} "
            f"with {prediction.patient_id}/{prediction.signal_name}"
        )
    common, ti, pi = np.intersect1d(
        truth.indices[truth.observed], prediction.indices[prediction.observed],
        assume_unique=True, return_indices=True,
    )
    y = truth.values[truth.observed][ti]
    y_hat = prediction.values[prediction.observed][pi]
    return AlignedPair(truth, prediction, _frozen(common.astype(np.int64)), _frozen(y), _frozen(y_hat))


def rmse(pair: AlignedPair) -> float:
    if pair.empty:
        raise EmptyAlignment("no common observed indices")
    err = pair.y - pair.y_hat
    return float(np.sqrt(np.mean(err * err)))


def window_rmse(pair: AlignedPair, event: EventAnnotation) -> float:
    """RMSE restricted to the inclusive event window."""
    mask = (pair.indices >= event.start_index) & (pair.indices <= event.end_index)
    if not mask.any():
        raise EmptyWindow(f"no aligned index in [{event.start_index}, {event.end_index}]")
    err = pair.y[mask] - pair.y_hat[mask]
    return float(np.sqrt(np.mean(err * err)))


def squared_errors_in(pair: AlignedPair, start: int, end: int) -> np.ndarray:
    mask = (pair.indices >= start) & (pair.indices <= end)
    err = pair.y[mask] - pair.y_hat[mask]
    return err * err


def series_key(series: VitalSeries) -> tuple[str, str]:
    return (series.patient_id, series.signal_name)


def index_series(series: Iterable[VitalSeries]) -> dict[tuple[str, str], VitalSeries]:
    out: dict[tuple[str, str], VitalSeries] = {}
    for s in series:
        key = series_key(s)
        if key in out:
            raise ValueError(f"duplicate series {key}")
        out[key] = s
    return out


def as_prediction(series: VitalSeries, model_id: str) -> PredictionSeries:
    return PredictionSeries(series.patient_id, series.signal_name, series.indices,
                            series.values, series.step_seconds, model_id=model_id)


def filter_events(events: Sequence[EventAnnotation], patient_id=None, signal_name=None,
                  event_type=None) -> list[EventAnnotation]:
    return [
        e for e in events
        if (patient_id is None or e.patient_id == patient_id)
        and (signal_name is None or e.signal_name == signal_name)
        and (event_type is None or e.event_type == event_type)
    ]
