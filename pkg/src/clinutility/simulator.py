"""Synthetic three-signal vital-sign simulator with injected events.

Baselines:
    s1(t) = c11*a + c12*g + c13*sin(alpha1*t) + noise
    s2(t) = c21*a + c22*g + c23*sin(alpha2*t) + noise
    s3(t) = c31*sin(alpha3*t) + c32*s1(t-1) + c33*s2(t-2) + noise

Events are drawn separately and added on top of the baselines. Each patient
gets two independent random streams derived from ``(seed, patient_index)``:
one for demographics and noise, one for events. Forcing or removing events
therefore never changes the baseline of the same patient.
"""

from __future__ import annotations

import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import EventAnnotation, VitalSeries

SIGNALS = ("s1", "s2", "s3")
TARGET_SIGNAL = "s3"

DEFAULT_COEFFICIENTS = {
    "c11": 0.1, "c12": 2.0, "c13": 3.0,
    "c21": 0.2, "c22": -2.0, "c23": 4.0,
    "c31": 5.0, "c32": 0.5, "c33": 0.5,
}
DEFAULT_FREQUENCIES = (0.1, 0.05, 0.03)


def _check_prob(name, p):
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim > 1 or np.any(arr < 0) or np.any(arr > 1) or np.any(np.isnan(arr)):
        raise ValueError(f"{name} must be a probability (or per-step sequence of probabilities)")


@dataclass(frozen=True)
class EventConfig:
    """Event injection settings.

    Per-step probabilities (``p_drop``, ``p_surge_s2``, ``p_trend``) may be a
    scalar or a sequence of length ``n_steps``.
    """

    p_drop: float | Sequence[float] = 7e-4
    drop_size: float = 7.0
    p_surge_after_drop: float = 0.75
    surge_size: float = 7.0
    p_surge_s2: float | Sequence[float] = 5e-4
    p_surge_propagate: float = 0.6
    propagate_lag: int = 2
    p_trend: float | Sequence[float] = 1e-4
    trend_slope: float = 1.0
    duration_max: int = 10
    range_sigma: float = 2.0

    def __post_init__(self):
        for name in ("p_drop", "p_surge_after_drop", "p_surge_s2", "p_surge_propagate", "p_trend"):
            _check_prob(name, getattr(self, name))
        if not self.drop_size > 0:
            raise ValueError("drop_size must be positive")
        if self.duration_max < 0 or self.propagate_lag < 0:
            raise ValueError("duration_max and propagate_lag must be >= 0")
        if not self.range_sigma > 0:
            raise ValueError("range_sigma must be positive")

    @property
    def sudden_probabilities(self):
        return self.p_drop, self.p_surge_s2, self.p_trend


@dataclass(frozen=True)
class SimConfig:
    n_patients: int = 1000
    n_steps: int = 500
    age_range: tuple[float, float] = (18.0, 80.0)
    coefficients: dict = field(default_factory=lambda: dict(DEFAULT_COEFFICIENTS))
    frequencies: tuple[float, float, float] = DEFAULT_FREQUENCIES
    noise_std: float = 1.0
    events: EventConfig = field(default_factory=EventConfig)
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 1 or self.n_steps < 1:
            raise ValueError("n_patients and n_steps must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if len(self.frequencies) != 3 or any(f <= 0 for f in self.frequencies):
            raise ValueError("need three positive frequencies")
        unknown = set(self.coefficients) - set(DEFAULT_COEFFICIENTS)
        if unknown:
            raise ValueError(f"unknown coefficients: {sorted(unknown)}")
        lo, hi = self.age_range
        if not lo <= hi:
            raise ValueError("age_range must be ordered")
        for name in ("p_drop", "p_surge_s2", "p_trend"):
            arr = np.asarray(getattr(self.events, name))
            if arr.ndim == 1 and arr.size != self.n_steps:
                raise ValueError(f"per-step {name} must have n_steps entries")

    def coefficient(self, name: str) -> float:
        return float(self.coefficients.get(name, DEFAULT_COEFFICIENTS[name]))


@dataclass(frozen=True, eq=False)
class SimulatedPatient:
    patient_id: str
    age: float
    group: int
    signals: dict[str, VitalSeries]
    event_log: list[EventAnnotation]
    range_events: list[EventAnnotation] = field(default_factory=list)

    def equals(self, other: "SimulatedPatient") -> bool:
        return (
            self.patient_id == other.patient_id
            and self.age == other.age
            and self.group == other.group
            and self.signals.keys() == other.signals.keys()
            and all(self.signals[k].equals(other.signals[k]) for k in self.signals)
            and self.event_log == other.event_log
            and self.range_events == other.range_events
        )


@dataclass(frozen=True)
class DatasetSummary:
    n_patients: int
    injected_counts: dict[str, int]
    range_counts: dict[str, int]
    mean_injected_per_patient: float
    mean_range_per_patient: float
    expected_injected_per_patient: float


@dataclass(frozen=True, eq=False)
class SimulatedDataset:
    patients: list[SimulatedPatient]
    summary: DatasetSummary

    def series(self):
        return [p.signals[s] for p in self.patients for s in SIGNALS]

    def events(self, include_range: bool = True):
        out = []
        for p in self.patients:
            out.extend(p.event_log)
            if include_range:
                out.extend(p.range_events)
        return out


def patient_id_for(index: int) -> str:
    return f"P{index:05d}"


def _streams(seed: int, patient_index: int):
    ss = np.random.SeedSequence([int(seed) & (2 ** 64 - 1), int(patient_index)])
    base, events = ss.spawn(2)
    return np.random.default_rng(base), np.random.default_rng(events)


def _lag(x: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros_like(x)
    if k < x.size:
        out[k:] = x[: x.size - k]
    return out


def baseline_signals(config: SimConfig, rng: np.random.Generator):
    """Draw demographics and the event-free signals."""
    c = config.coefficient
    a1, a2, a3 = config.frequencies
    T = config.n_steps
    age = float(rng.uniform(*config.age_range))
    group = int(rng.binomial(1, 0.5))
    noise = rng.standard_normal((3, T)) * config.noise_std
    t = np.arange(T, dtype=np.float64)
    s1 = c("c11") * age + c("c12") * group + c("c13") * np.sin(a1 * t) + noise[0]
    s2 = c("c21") * age + c("c22") * group + c("c23") * np.sin(a2 * t) + noise[1]
    s3 = c("c31") * np.sin(a3 * t) + c("c32") * _lag(s1, 1) + c("c33") * _lag(s2, 2) + noise[2]
    return age, group, s1, s2, s3


def _add_window(signal: np.ndarray, start: int, duration: int, amount) -> tuple[int, int] | None:
    """Add ``amount`` (scalar or per-step array) on ``[start, start+duration]`` clipped to the series."""
    T = signal.size
    if start >= T:
        return None
    end = min(start + duration, T - 1)
    amount = np.asarray(amount, dtype=np.float64)
    signal[start:end + 1] += amount if amount.ndim == 0 else amount[: end - start + 1]
    return start, end


def inject_events(config: SimConfig, rng: np.random.Generator, patient_id: str,
                  s2: np.ndarray, s3: np.ndarray) -> list[EventAnnotation]:
    """Draw and add events in place; returns the log of injected windows."""
    ev = config.events
    T = config.n_steps
    dmax = ev.duration_max
    # Every draw happens unconditionally so the stream layout never depends on outcomes.
    u_drop, u_drop_follow, u_s2, u_prop, u_trend = rng.random((5, T))
    d_drop, d_s2, d_trend = rng.integers(0, dmax + 1, size=(3, T))
    p_drop = np.broadcast_to(np.asarray(ev.p_drop, dtype=np.float64), (T,))
    p_s2 = np.broadcast_to(np.asarray(ev.p_surge_s2, dtype=np.float64), (T,))
    p_trend = np.broadcast_to(np.asarray(ev.p_trend, dtype=np.float64), (T,))

    log: list[EventAnnotation] = []

    def record(signal_name, window, kind):
        if window is not None:
            log.append(EventAnnotation(patient_id, signal_name, window[0], window[1], kind))

    for t in np.flatnonzero(u_drop < p_drop):
        t = int(t)
        record("s2", _add_window(s2, t, 0, -ev.drop_size), "sudden_drop")
        if u_drop_follow[t] < ev.p_surge_after_drop:
            record("s3", _add_window(s3, t + 1, int(d_drop[t]), ev.surge_size), "surge")
    for t in np.flatnonzero(u_s2 < p_s2):
        t = int(t)
        d = int(d_s2[t])
        record("s2", _add_window(s2, t, d, ev.surge_size), "surge")
        if u_prop[t] < ev.p_surge_propagate:
            record("s3", _add_window(s3, t + ev.propagate_lag, d, ev.surge_size), "surge")
    for t in np.flatnonzero(u_trend < p_trend):
        t = int(t)
        d = int(d_trend[t])
        ramp = ev.trend_slope * np.arange(1, d + 2, dtype=np.float64)
        record("s3", _add_window(s3, t, d, ramp), "trend")
    log.sort(key=lambda e: (e.start_index, e.signal_name, e.event_type, e.end_index))
    return log


def detect_range_events(series: VitalSeries, range_sigma: float = 2.0) -> list[EventAnnotation]:
    """Maximal runs of observed points further than ``range_sigma`` std from the series mean."""
    vals = series.values
    obs = ~np.isnan(vals)
    if not obs.any():
        return []
    mean = vals[obs].mean()
    std = vals[obs].std()
    if std == 0:
        return []
    flag = np.zeros(vals.size, dtype=bool)
    flag[obs] = np.abs(vals[obs] - mean) > range_sigma * std
    events = []
    idx = series.indices
    pos = 0
    while pos < flag.size:
        if not flag[pos]:
            pos += 1
            continue
        end = pos
        # A run continues only over consecutive grid indices.
        while end + 1 < flag.size and flag[end + 1] and idx[end + 1] == idx[end] + 1:
            end += 1
        events.append(EventAnnotation(series.patient_id, series.signal_name,
                                      int(idx[pos]), int(idx[end]), "range"))
        pos = end + 1
    return events


def generate_patient(config: SimConfig, patient_index: int) -> SimulatedPatient:
    if not 0 <= patient_index < config.n_patients:
        raise IndexError("patient_index out of range")
    base_rng, event_rng = _streams(config.seed, patient_index)
    age, group, s1, s2, s3 = baseline_signals(config, base_rng)
    pid = patient_id_for(patient_index)
    log = inject_events(config, event_rng, pid, s2, s3)
    signals = {name: VitalSeries.from_values(pid, name, arr) for name, arr in zip(SIGNALS, (s1, s2, s3))}
    range_events = []
    for name in SIGNALS:
        range_events.extend(detect_range_events(signals[name], config.events.range_sigma))
    return SimulatedPatient(pid, age, group, signals, log, range_events)


def expected_injected_per_patient(config: SimConfig) -> float:
    """Closed-form expectation of logged injected events (ignoring end-of-series clipping)."""
    ev = config.events
    T = config.n_steps

    def total(p):
        arr = np.asarray(p, dtype=np.float64)
        return float(arr.sum()) if arr.ndim else float(arr) * T

    drops, s2_surges, trends = total(ev.p_drop), total(ev.p_surge_s2), total(ev.p_trend)
    return (drops + s2_surges + trends
            + drops * ev.p_surge_after_drop + s2_surges * ev.p_surge_propagate)


def injected_event_variance(config: SimConfig) -> float:
    """Per-patient variance of the injected count under the same independence model."""
    ev = config.events
    T = config.n_steps

    def per_step(p):
        return np.broadcast_to(np.asarray(p, dtype=np.float64), (T,))

    var = 0.0
    # Each step contributes a Bernoulli(p) primary plus a dependent follow-up.
    for p, q in ((per_step(ev.p_drop), ev.p_surge_after_drop),
                 (per_step(ev.p_surge_s2), ev.p_surge_propagate),
                 (per_step(ev.p_trend), 0.0)):
        mean = p * (1 + q)
        second = p * ((1 - q) * 1 + q * 4)
        var += float(np.sum(second - mean ** 2))
    return var


def summarize(patients: Sequence[SimulatedPatient], config: SimConfig) -> DatasetSummary:
    injected = Counter()
    ranges = Counter()
    for p in patients:
        injected.update(f"{e.signal_name}:{e.event_type}" for e in p.event_log)
        ranges.update(e.signal_name for e in p.range_events)
    n = len(patients)
    return DatasetSummary(
        n_patients=n,
        injected_counts=dict(sorted(injected.items())),
        range_counts=dict(sorted(ranges.items())),
        mean_injected_per_patient=sum(injected.values()) / n,
        mean_range_per_patient=sum(ranges.values()) / n,
        expected_injected_per_patient=expected_injected_per_patient(config),
    )


def generate_dataset(config: SimConfig, threads: int = 1) -> SimulatedDataset:
    indices = range(config.n_patients)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            patients = list(pool.map(lambda i: generate_patient(config, i), indices))
    else:
        patients = [generate_patient(config, i) for i in indices]
    return SimulatedDataset(patients, summarize(patients, config))


def binomial_standard_error(config: SimConfig) -> float:
    return math.sqrt(injected_event_variance(config) / config.n_patients)
