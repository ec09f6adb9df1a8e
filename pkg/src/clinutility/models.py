"""Forecasting baselines and a small gradient-trainable lag-window network."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import PredictionSeries, VitalSeries

MODEL_KINDS = ("persistence", "linear_ar", "ridge_ar", "gradient_net")
GRADIENT_KINDS = ("gradient_net",)


class ModelError(ValueError):
    pass


class SingularSystem(ModelError):
    pass


class DimensionMismatch(ModelError):
    pass


class StaleCache(ModelError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    """Which lags feed a model: the target's own lags first, then auxiliary signals."""

    target: str = "s3"
    aux_signals: tuple[str, ...] = ("s1", "s2")
    lags: int = 3

    def __post_init__(self):
        if self.lags < 1:
            raise ValueError("lags must be >= 1")
        object.__setattr__(self, "aux_signals", tuple(self.aux_signals))
        if self.target in self.aux_signals:
            raise ValueError("target must not be repeated among aux_signals")

    @property
    def signals(self) -> tuple[str, ...]:
        return (self.target,) + self.aux_signals

    @property
    def n_features(self) -> int:
        return self.lags * len(self.signals)

    @property
    def last_target_column(self) -> int:
        return self.lags - 1


@dataclass(frozen=True)
class FeatureWindow:
    """Lag values (oldest first) of the target and optional auxiliary signals."""

    lag_values: np.ndarray
    aux_lags: np.ndarray | None = None
    static_features: tuple[float, ...] | None = None

    def __post_init__(self):
        lags = np.asarray(self.lag_values, dtype=np.float64).reshape(-1)
        if lags.size < 1:
            raise ValueError("need at least one lag")
        if np.isnan(lags).any():
            raise ValueError("windows with missing lags must be excluded upstream")
        object.__setattr__(self, "lag_values", lags)
        if self.aux_lags is not None:
            object.__setattr__(self, "aux_lags", np.asarray(self.aux_lags, dtype=np.float64).reshape(-1))

    def vector(self) -> np.ndarray:
        parts = [self.lag_values]
        if self.aux_lags is not None:
            parts.append(self.aux_lags)
        if self.static_features is not None:
            parts.append(np.asarray(self.static_features, dtype=np.float64))
        return np.concatenate(parts)


def design_matrix(signals: Mapping[str, VitalSeries], spec: FeatureSpec):
    """Lag features for every target index whose lags are all observed.

    Returns ``(X, indices, y)`` where ``y`` may contain NaN (missing target).
    """
    target = signals[spec.target]
    start = int(target.indices[0])
    stop = int(target.indices[-1]) + 1
    dense = [signals[name].dense(start, stop) for name in spec.signals]
    T = stop - start
    k = spec.lags
    if T <= k:
        return np.empty((0, spec.n_features)), np.empty(0, dtype=np.int64), np.empty(0)
    cols = []
    for arr in dense:
        for lag in range(k, 0, -1):
            cols.append(arr[k - lag: T - lag])
    X = np.column_stack(cols)
    y = dense[0][k:]
    ok = ~np.isnan(X).any(axis=1)
    idx = np.arange(start + k, stop, dtype=np.int64)
    return X[ok], idx[ok], y[ok]


def window_at(signals: Mapping[str, VitalSeries], spec: FeatureSpec, t: int) -> FeatureWindow:
    lags = [[signals[name].value_at(i) for i in range(t - spec.lags, t)] for name in spec.signals]
    aux = np.concatenate(lags[1:]) if spec.aux_signals else None
    return FeatureWindow(np.array(lags[0]), aux)


def persistence_predict(window: FeatureWindow) -> float:
    return float(window.lag_values[-1])


@dataclass(eq=False)
class ModelParams:
    """Weights of any supported model kind.

    Prediction is ``z @ w + b + tanh(z @ W1.T + b1) @ w2`` with
    ``z = (x - shift) / scale``; linear kinds have a zero-width hidden layer.
    """

    kind: str
    n_features: int
    w: np.ndarray
    b: float = 0.0
    W1: np.ndarray | None = None
    b1: np.ndarray | None = None
    w2: np.ndarray | None = None
    shift: np.ndarray | None = None
    scale: np.ndarray | None = None
    ridge_strength: float = 0.0
    activation: str = "tanh"
    feature_spec: FeatureSpec = field(default_factory=FeatureSpec)
    epochs_trained: int = 0
    version: int = 0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}")
        if self.activation != "tanh":
            raise ModelError("only tanh activation is supported")
        d = self.n_features
        self.w = np.asarray(self.w, dtype=np.float64).reshape(d)
        self.b = float(self.b)
        self.W1 = np.zeros((0, d)) if self.W1 is None else np.asarray(self.W1, dtype=np.float64).reshape(-1, d)
        h = self.W1.shape[0]
        self.b1 = np.zeros(h) if self.b1 is None else np.asarray(self.b1, dtype=np.float64).reshape(h)
        self.w2 = np.zeros(h) if self.w2 is None else np.asarray(self.w2, dtype=np.float64).reshape(h)
        self.shift = np.zeros(d) if self.shift is None else np.asarray(self.shift, dtype=np.float64).reshape(d)
        self.scale = np.ones(d) if self.scale is None else np.asarray(self.scale, dtype=np.float64).reshape(d)
        if np.any(self.scale <= 0):
            raise ModelError("feature scale must be positive")
        if self.ridge_strength < 0:
            raise ModelError("ridge strength must be >= 0")
        for name in self.trainable:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ModelError(f"non-finite weights in {name}")

    trainable = ("w", "b", "W1", "b1", "w2")

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams(self.kind, self.n_features, self.w.copy(), self.b, self.W1.copy(),
                           self.b1.copy(), self.w2.copy(), self.shift.copy(), self.scale.copy(),
                           self.ridge_strength, self.activation, self.feature_spec, self.epochs_trained)

    def apply_update(self, grads: Mapping[str, np.ndarray], step: float) -> None:
        """In-place ``param -= step * grad``; bumps ``version`` so old caches go stale."""
        self.w = self.w - step * grads["w"]
        self.b = float(self.b - step * grads["b"])
        self.W1 = self.W1 - step * grads["W1"]
        self.b1 = self.b1 - step * grads["b1"]
        self.w2 = self.w2 - step * grads["w2"]
        self.version += 1

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w, [self.b], self.W1.ravel(), self.b1, self.w2])

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise DimensionMismatch(f"expected {self.n_features} features, got {X.shape[1]}")
        if self.kind == "persistence":
            return X[:, self.feature_spec.last_target_column].copy()
        return forward_batch(self, X)[0]


@dataclass(eq=False)
class ForwardCache:
    params: ModelParams
    version: int
    z: np.ndarray
    hidden_out: np.ndarray


def forward_batch(params: ModelParams, X: np.ndarray):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != params.n_features:
        raise DimensionMismatch(f"expected {params.n_features} features, got {X.shape[1]}")
    z = (X - params.shift) / params.scale
    h = np.tanh(z @ params.W1.T + params.b1)
    pred = z @ params.w + params.b + h @ params.w2
    return pred, ForwardCache(params, params.version, z, h)


def gradient_net_forward(params: ModelParams, window):
    """Single-window forward pass; accepts a FeatureWindow or a feature vector."""
    x = window.vector() if isinstance(window, FeatureWindow) else np.asarray(window, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatch("a single window must be one-dimensional")
    pred, cache = forward_batch(params, x[None, :])
    return float(pred[0]), cache


def gradient_net_backward(cache: ForwardCache, dloss_dpred) -> dict[str, np.ndarray]:
    """Parameter gradients for a forward cache, summed over the cached batch."""
    params = cache.params
    if params.version != cache.version:
        raise StaleCache("parameters changed since the forward pass")
    g = np.broadcast_to(np.asarray(dloss_dpred, dtype=np.float64), (cache.z.shape[0],))
    h = cache.hidden_out
    da = (g[:, None] * params.w2) * (1.0 - h * h)
    return {
        "w": cache.z.T @ g,
        "b": np.asarray(g.sum()),
        "W1": da.T @ cache.z,
        "b1": da.sum(axis=0),
        "w2": h.T @ g,
    }


def fit_linear_ar(X, y, ridge_strength: float = 0.0, feature_spec: FeatureSpec | None = None) -> ModelParams:
    """Least squares / ridge fit with an unpenalized intercept."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise DimensionMismatch("X must be (n, d) and y (n,)")
    n, d = X.shape
    if n < d + 1:
        raise ModelError(f"need at least {d + 1} examples, got {n}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ModelError("non-finite training data")
    if ridge_strength < 0:
        raise ModelError("ridge strength must be >= 0")
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    yc = y - y_mean
    if ridge_strength == 0:
        if np.linalg.matrix_rank(Xc) < d:
            raise SingularSystem("design matrix is rank deficient")
        A, rhs = Xc, yc
    else:
        A = np.vstack([Xc, np.sqrt(ridge_strength) * np.eye(d)])
        rhs = np.concatenate([yc, np.zeros(d)])
    w, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    kind = "linear_ar" if ridge_strength == 0 else "ridge_ar"
    return ModelParams(kind, d, w, float(y_mean - x_mean @ w), ridge_strength=ridge_strength,
                       feature_spec=feature_spec or FeatureSpec())


def init_gradient_net(n_features: int, hidden: int, seed: int, shift=None, scale=None,
                      bias: float = 0.0, feature_spec: FeatureSpec | None = None) -> ModelParams:
    """Small uniform weights scaled by fan-in, drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    lim_in = 1.0 / np.sqrt(n_features)
    lim_hidden = 1.0 / np.sqrt(max(hidden, 1))
    return ModelParams(
        "gradient_net", n_features,
        w=rng.uniform(-lim_in, lim_in, n_features),
        b=bias,
        W1=rng.uniform(-lim_in, lim_in, (hidden, n_features)),
        b1=np.zeros(hidden),
        w2=rng.uniform(-lim_hidden, lim_hidden, hidden),
        shift=shift, scale=scale,
        feature_spec=feature_spec or FeatureSpec(),
    )


def standardization(X: np.ndarray):
    shift = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    return shift, scale


def predict_series(params: ModelParams, signals: Mapping[str, VitalSeries], model_id: str) -> PredictionSeries:
    spec = params.feature_spec
    X, idx, _ = design_matrix(signals, spec)
    target = signals[spec.target]
    preds = params.predict(X) if idx.size else np.empty(0)
    return PredictionSeries(target.patient_id, target.signal_name, idx, preds,
                            target.step_seconds, model_id=model_id)


def training_examples(patients: Sequence[Mapping[str, VitalSeries]], spec: FeatureSpec):
    """Stacked lag features and observed targets across patients."""
    Xs, ys = [], []
    for signals in patients:
        X, _, y = design_matrix(signals, spec)
        keep = ~np.isnan(y)
        Xs.append(X[keep])
        ys.append(y[keep])
    if not Xs:
        return np.empty((0, spec.n_features)), np.empty(0)
    return np.vstack(Xs), np.concatenate(ys)
