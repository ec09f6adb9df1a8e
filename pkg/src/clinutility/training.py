"""Composite utility loss, minibatch gradient descent and the warm-start schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import EmptyAlignment, EventAnnotation, NormalRangeParams, PredictionSeries, TrendParams, VitalSeries
from .models import (
    GRADIENT_KINDS,
    FeatureSpec,
    ModelError,
    ModelParams,
    design_matrix,
    fit_linear_ar,
    forward_batch,
    gradient_net_backward,
    init_gradient_net,
    predict_series,
    standardization,
    training_examples,
)
from .utility import (
    SIMULATION_RANGE,
    normal_range_cost,
    predicted_slope_weights,
    range_cost_subgradient,
    trend_arrays,
)

UTILITY_TERMS = ("range", "trend", "trend_dev")
LOSS_TERMS = ("mse",) + UTILITY_TERMS


class TrainingError(RuntimeError):
    pass


class NonGradientModel(TrainingError):
    pass


class DivergedLoss(TrainingError):
    def __init__(self, message, last_good_epoch):
        super().__init__(message)
        self.last_good_epoch = last_good_epoch


class TooFewPatients(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    range_params: NormalRangeParams = SIMULATION_RANGE
    trend_params: TrendParams = field(default_factory=TrendParams)
    lambdas: Mapping[str, float] = field(default_factory=lambda: {t: 0.0 for t in UTILITY_TERMS})
    include: tuple[str, ...] = LOSS_TERMS

    def __post_init__(self):
        object.__setattr__(self, "include", tuple(self.include))
        if "mse" not in self.include:
            raise ValueError("the mse term is always included")
        unknown = set(self.include) - set(LOSS_TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}")
        lambdas = {t: 0.0 for t in UTILITY_TERMS}
        for key, val in dict(self.lambdas).items():
            if key not in UTILITY_TERMS:
                raise ValueError(f"unknown lambda {key!r}")
            if not val >= 0:
                raise ValueError("lambdas must be >= 0")
            lambdas[key] = float(val)
        object.__setattr__(self, "lambdas", lambdas)

    def weight(self, term: str) -> float:
        if term == "mse":
            return 1.0
        return self.lambdas[term] if term in self.include else 0.0

    def with_lambdas(self, **lambdas) -> "LossConfig":
        merged = dict(self.lambdas)
        merged.update(lambdas)
        return replace(self, lambdas=merged)


@dataclass
class LossTerms:
    """Per-term sums over points, counts and gradients of the sums on a dense grid."""

    sums: dict[str, float]
    counts: dict[str, int]
    grads: dict[str, np.ndarray]

    def mean(self, term: str) -> float:
        c = self.counts[term]
        return self.sums[term] / c if c else 0.0


def loss_terms(y: np.ndarray, p: np.ndarray, config: LossConfig, need: Sequence[str] = LOSS_TERMS) -> LossTerms:
    """Evaluate the requested terms on dense truth/prediction arrays (NaN = absent)."""
    both = ~np.isnan(y) & ~np.isnan(p)
    yb, pb = y[both], p[both]
    sums, counts, grads = {}, {}, {}
    err = pb - yb
    sums["mse"] = float(err @ err)
    counts["mse"] = int(both.sum())
    g = np.zeros(y.size)
    g[both] = 2.0 * err
    grads["mse"] = g
    if "range" in need:
        sums["range"] = float(np.sum(normal_range_cost(yb, pb, config.range_params)))
        counts["range"] = counts["mse"]
        g = np.zeros(y.size)
        g[both] = range_cost_subgradient(yb, pb, config.range_params)
        grads["range"] = g
    if "trend" in need or "trend_dev" in need:
        tp = config.trend_params
        tr = trend_arrays(y, p, tp)
        v = tr.valid
        if "trend" in need:
            gap = tr.gap[v]
            over, under = np.maximum(gap, 0), np.maximum(-gap, 0)
            sums["trend"] = float(np.sum(over ** 2 * tp.weight_over_w_l + under ** 2 * tp.weight_under_w_h))
            counts["trend"] = int(v.sum())
            outer = np.zeros(y.size)
            outer[v] = 2 * over * tp.weight_over_w_l - 2 * under * tp.weight_under_w_h
            g = np.zeros(y.size)
            weights = predicted_slope_weights(tp)
            # Anchor t feeds predictions t+1..t+m through the OLS weights.
            for j, c in enumerate(weights, start=1):
                g[j:] += outer[:-j] * c
            grads["trend"] = g
        if "trend_dev" in need:
            dv = v & both
            dev2 = (tr.expected[dv] - tr.actual[dv]) ** 2
            sums["trend_dev"] = float(np.sum(dev2 * np.abs(y[dv] - p[dv])))
            counts["trend_dev"] = int(dv.sum())
            g = np.zeros(y.size)
            g[dv] = -dev2 * np.sign(y[dv] - p[dv])
            grads["trend_dev"] = g
    return LossTerms(sums, counts, grads)


@dataclass(frozen=True)
class CompositeLoss:
    loss: float
    gradient: np.ndarray
    terms: dict[str, float]
    weighted: dict[str, float]
    counts: dict[str, int]
    skipped: dict[str, int]


def _combine(terms: LossTerms, config: LossConfig, size: int):
    loss = 0.0
    grad = np.zeros(size)
    means, weighted, skipped = {}, {}, {}
    for term in LOSS_TERMS:
        lam = config.weight(term)
        if term not in terms.sums:
            means[term] = 0.0
            weighted[term] = 0.0
            continue
        c = terms.counts[term]
        means[term] = terms.mean(term)
        skipped[term] = 0 if c else 1
        if lam == 0 or c == 0:
            weighted[term] = 0.0
            continue
        weighted[term] = lam * means[term]
        loss += weighted[term]
        grad += (lam / c) * terms.grads[term]
    return loss, grad, means, weighted, skipped


def _active_terms(config: LossConfig) -> tuple[str, ...]:
    return ("mse",) + tuple(t for t in UTILITY_TERMS if config.weight(t) > 0)


def composite_loss(predictions: PredictionSeries, truth: VitalSeries, config: LossConfig,
                   record_all: bool = False) -> CompositeLoss:
    """MSE plus lambda-weighted utility means, with the gradient w.r.t. each prediction.

    The returned gradient is aligned with ``predictions.indices`` (0 where the
    prediction or truth is missing).
    """
    start = int(min(truth.indices[0], predictions.indices[0]))
    stop = int(max(truth.indices[-1], predictions.indices[-1])) + 1
    y = truth.dense(start, stop)
    p = predictions.dense(start, stop)
    need = LOSS_TERMS if record_all else _active_terms(config)
    terms = loss_terms(y, p, config, need)
    if terms.counts["mse"] == 0:
        raise EmptyAlignment("no common observed indices")
    loss, grad, means, weighted, skipped = _combine(terms, config, y.size)
    return CompositeLoss(loss, grad[predictions.indices - start], means, weighted, dict(terms.counts), skipped)


# --- schedule ---------------------------------------------------------------

@dataclass(frozen=True)
class TermPhase:
    term: str
    lambda_start: float
    lambda_end: float
    escalation_steps: int = 0
    auto_balance: bool = False

    def __post_init__(self):
        if self.term not in UTILITY_TERMS:
            raise ValueError(f"unknown utility term {self.term!r}")
        if not (0 <= self.lambda_start <= self.lambda_end):
            raise ValueError("need 0 <= lambda_start <= lambda_end")
        if self.escalation_steps < 0:
            raise ValueError("escalation_steps must be >= 0")

    def lam(self, epoch_in_phase: int) -> float:
        """Linear ramp reaching lambda_end after ``escalation_steps`` epochs."""
        if self.escalation_steps == 0:
            return self.lambda_end
        frac = min(1.0, (epoch_in_phase + 1) / self.escalation_steps)
        return self.lambda_start + (self.lambda_end - self.lambda_start) * frac


@dataclass(frozen=True)
class WarmStartSchedule:
    warm_epochs: int = 50
    phases: tuple[TermPhase, ...] = ()
    patience: int = 10
    relative_tolerance: float = 0.01
    learning_rate: float = 0.05
    batch_size: int = 16
    max_epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))
        if self.warm_epochs < 0:
            raise ValueError("warm_epochs must be >= 0")
        if self.patience < 1 or not self.relative_tolerance > 0:
            raise ValueError("patience must be >= 1 and tolerance > 0")
        if self.batch_size < 1 or self.max_epochs < 0 or self.learning_rate < 0:
            raise ValueError("invalid optimizer settings")
        terms = [p.term for p in self.phases]
        if len(set(terms)) != len(terms):
            raise ValueError("each utility term may appear in one phase only")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    phase: int
    phase_term: str
    total: float
    losses: dict[str, float]
    lambdas: dict[str, float]


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, term: str, phase: int | None = None) -> np.ndarray:
        return np.array([r.losses[term] for r in self.records if phase is None or r.phase == phase])

    def phase_transitions(self) -> list[int]:
        """Epochs at which a new phase starts."""
        return [r.epoch for prev, r in zip(self.records, self.records[1:]) if r.phase != prev.phase]

    header = ("epoch", "phase", "phase_term", "total") + LOSS_TERMS + tuple(f"lambda_{t}" for t in UTILITY_TERMS)

    def rows(self):
        for r in self.records:
            yield ([r.epoch, r.phase, r.phase_term, r.total] + [r.losses[t] for t in LOSS_TERMS]
                   + [r.lambdas[t] for t in UTILITY_TERMS])


def check_stabilization(history: TrainingHistory, term: str, patience: int, tol: float) -> bool:
    """True when the ``patience``-epoch moving average of ``term`` changed by less than ``tol`` (relative).

    Only epochs of the latest phase count; the comparison needs ``patience + 1`` of them.
    """
    if not history.records:
        return False
    phase = history.records[-1].phase
    values = history.column(term, phase)
    if values.size < patience + 1:
        return False
    current = values[-patience:].mean()
    previous = values[-patience - 1:-1].mean()
    if previous == 0:
        return current == 0
    return abs(current - previous) / abs(previous) < tol


# --- data preparation -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PreparedPatient:
    X: np.ndarray
    positions: np.ndarray
    y: np.ndarray


def prepare(patients: Sequence[Mapping[str, VitalSeries]], spec: FeatureSpec) -> list[PreparedPatient]:
    out = []
    for signals in patients:
        target = signals[spec.target]
        X, idx, _ = design_matrix(signals, spec)
        start = int(target.indices[0])
        out.append(PreparedPatient(X, idx - start, target.dense()))
    return out


def _pack(batch: Sequence[PreparedPatient], gap: int):
    """Concatenate patients on one grid with NaN gaps wide enough to break every trend window."""
    offsets, pos, ys = [], 0, []
    for pp in batch:
        offsets.append(pos)
        ys.append(pp.y)
        ys.append(np.full(gap, np.nan))
        pos += pp.y.size + gap
    y = np.concatenate(ys) if ys else np.empty(0)
    X = np.vstack([pp.X for pp in batch])
    where = np.concatenate([pp.positions + off for pp, off in zip(batch, offsets)])
    return X, y, where


def _batch_loss(params: ModelParams, X, y, where, config: LossConfig, need, with_grads: bool):
    preds, cache = forward_batch(params, X)
    p = np.full(y.size, np.nan)
    p[where] = preds
    terms = loss_terms(y, p, config, need)
    loss, grad, means, weighted, _ = _combine(terms, config, y.size)
    grads = gradient_net_backward(cache, grad[where]) if with_grads else None
    return loss, grads, means, weighted


def train(model: ModelParams, patients: Sequence[Mapping[str, VitalSeries]], schedule: WarmStartSchedule,
          loss_config: LossConfig, start_epoch: int | None = None,
          callback: Callable[[EpochRecord], None] | None = None):
    """Warm-start minibatch gradient descent over patients.

    Phase 0 optimizes MSE alone for ``warm_epochs``. Each later phase switches
    its utility term on, ramps its lambda linearly, and hands over to the next
    phase once the term's loss has stabilized. Every epoch ends with a full
    pass over the training set to record per-term losses.
    """
    if model.kind not in GRADIENT_KINDS:
        raise NonGradientModel(f"{model.kind} models are not trained by gradient descent")
    data = [pp for pp in prepare(patients, model.feature_spec) if pp.X.shape[0]]
    if not data:
        raise TrainingError("no usable training windows")
    params = model.copy()
    tp = loss_config.trend_params
    gap = tp.lookback_n + tp.horizon_m + 1
    X_all, y_all, where_all = _pack(data, gap)
    epoch0 = model.epochs_trained if start_epoch is None else start_epoch
    lambdas = {t: 0.0 for t in UTILITY_TERMS}
    scale = {t: 1.0 for t in UTILITY_TERMS}
    phase, phase_epoch = 0, 0
    history = TrainingHistory()
    last_good = epoch0 - 1

    def current_config():
        return loss_config.with_lambdas(**lambdas)

    for k in range(schedule.max_epochs):
        epoch = epoch0 + k
        if phase == 0 and k >= schedule.warm_epochs and schedule.phases:
            phase, phase_epoch = 1, 0
        if phase >= 1:
            spec = schedule.phases[phase - 1]
            if phase_epoch == 0 and spec.auto_balance:
                scale[spec.term] = _balance_factor(params, X_all, y_all, where_all, loss_config, spec.term)
            lambdas[spec.term] = spec.lam(phase_epoch) * scale[spec.term]
        config = current_config()
        need = _active_terms(config)
        rng = np.random.default_rng([schedule.seed, epoch])
        order = rng.permutation(len(data))
        for b in range(0, len(order), schedule.batch_size):
            batch = [data[i] for i in order[b:b + schedule.batch_size]]
            X, y, where = _pack(batch, gap)
            _, grads, _, _ = _batch_loss(params, X, y, where, config, need, True)
            if schedule.learning_rate:
                params.apply_update(grads, schedule.learning_rate)
        total, _, means, weighted = _batch_loss(params, X_all, y_all, where_all, config, need, False)
        if not math.isfinite(total) or not np.all(np.isfinite(params.flat())):
            raise DivergedLoss(f"loss became non-finite at epoch {epoch}", last_good)
        last_good = epoch
        record = EpochRecord(
            epoch, phase, "mse" if phase == 0 else schedule.phases[phase - 1].term,
            float(total), {t: float(weighted[t]) for t in LOSS_TERMS}, dict(lambdas),
        )
        history.records.append(record)
        if callback:
            callback(record)
        phase_epoch += 1
        if phase >= 1 and phase < len(schedule.phases):
            spec = schedule.phases[phase - 1]
            ramped = phase_epoch >= spec.escalation_steps
            if ramped and check_stabilization(history, spec.term, schedule.patience,
                                              schedule.relative_tolerance):
                phase, phase_epoch = phase + 1, 0
    params.epochs_trained = epoch0 + schedule.max_epochs
    return params, history


def _balance_factor(params, X, y, where, config: LossConfig, term: str) -> float:
    """Scale that brings the term's mean to the current MSE level."""
    preds, _ = forward_batch(params, X)
    p = np.full(y.size, np.nan)
    p[where] = preds
    terms = loss_terms(y, p, config, ("mse", term))
    u = terms.mean(term)
    return terms.mean("mse") / u if u > 0 else 1.0


# --- model construction and cross-validation --------------------------------

@dataclass(frozen=True)
class ModelRecipe:
    kind: str = "gradient_net"
    hidden: int = 8
    ridge_strength: float = 1.0
    feature_spec: FeatureSpec = field(default_factory=FeatureSpec)
    schedule: WarmStartSchedule = field(default_factory=WarmStartSchedule)
    loss: LossConfig = field(default_factory=LossConfig)


def fit_model(recipe: ModelRecipe, patients: Sequence[Mapping[str, VitalSeries]], seed: int = 0,
              callback: Callable[[EpochRecord], None] | None = None):
    """Fit any supported model kind; returns ``(params, history or None)``."""
    spec = recipe.feature_spec
    X, y = training_examples(patients, spec)
    if recipe.kind == "persistence":
        return ModelParams("persistence", spec.n_features, np.zeros(spec.n_features), feature_spec=spec), None
    if recipe.kind in ("linear_ar", "ridge_ar"):
        ridge = 0.0 if recipe.kind == "linear_ar" else recipe.ridge_strength
        return fit_linear_ar(X, y, ridge, feature_spec=spec), None
    if recipe.kind == "gradient_net":
        shift, scale = standardization(X)
        model = init_gradient_net(spec.n_features, recipe.hidden, seed, shift, scale, float(y.mean()), spec)
        return train(model, patients, replace(recipe.schedule, seed=seed), recipe.loss, callback=callback)
    raise ModelError(f"unknown model kind {recipe.kind!r}")


def fold_assignment(patient_ids: Sequence[str], k_folds: int, seed: int) -> list[list[str]]:
    if k_folds < 2:
        raise ValueError("k_folds must be >= 2")
    if len(patient_ids) < k_folds:
        raise TooFewPatients(f"{len(patient_ids)} patients for {k_folds} folds")
    rng = np.random.default_rng([seed, 7919])
    order = rng.permutation(len(patient_ids))
    return [[patient_ids[i] for i in sorted(part)] for part in np.array_split(order, k_folds)]


@dataclass(frozen=True, eq=False)
class CrossValResult:
    folds: list[list[str]]
    reports: list
    histories: list
    summary: dict[str, tuple[float, float]]


def crossval(patients: Sequence[Mapping[str, VitalSeries]], recipe: ModelRecipe, k_folds: int = 5,
             seed: int = 0, annotations: Sequence[EventAnnotation] = (), model_id: str | None = None,
             threads: int = 1) -> CrossValResult:
    """Patient-level k-fold cross-validation; each fold trains on the others and evaluates held out."""
    from .evaluation import evaluate, summarize_reports

    target = recipe.feature_spec.target
    ids = [p[target].patient_id for p in patients]
    if len(set(ids)) != len(ids):
        raise ValueError("patient ids must be unique")
    folds = fold_assignment(ids, k_folds, seed)
    by_id = dict(zip(ids, patients))
    name = model_id or recipe.kind

    def run(fold_idx):
        test_ids = set(folds[fold_idx])
        train_set = [by_id[i] for i in ids if i not in test_ids]
        test_set = [by_id[i] for i in folds[fold_idx]]
        params, history = fit_model(recipe, train_set, seed=seed + fold_idx)
        preds = [predict_series(params, s, name) for s in test_set]
        truth = [s[target] for s in test_set]
        events = [e for e in annotations if e.patient_id in test_ids and e.signal_name == target]
        report = evaluate(truth, preds, events, recipe.loss.range_params, recipe.loss.trend_params)
        return report, history

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(k_folds)))
    else:
        results = [run(i) for i in range(k_folds)]
    reports = [r for r, _ in results]
    return CrossValResult(folds, reports, [h for _, h in results], summarize_reports(reports))
