"""Run configuration: YAML key tree with defaults, strict key checking and line-addressed errors.

Key tree (every key optional)::

    seed: int
    simulate:   n_patients, n_steps, age_range, noise_std, frequencies,
                coefficients: {c11 .. c33}, events: {p_drop, drop_size, ...}
    model:      kind, hidden, ridge_strength, features: {target, aux_signals, lags}
    loss:       range: {amplitude_L, steepness_low_k_l, steepness_high_k_h,
                        low_threshold_l, high_threshold_h}
                trend: {lookback_n, horizon_m, weight_over_w_l, weight_under_w_h}
                include: [mse, range, trend, trend_dev]
    schedule:   warm_epochs, patience, relative_tolerance, learning_rate,
                batch_size, max_epochs,
                phases: [{term, lambda_start, lambda_end, escalation_steps, auto_balance}]
    evaluate:   pooling (event | point), histogram_bins
"""

from __future__ import annotations

import copy
from dataclasses import asdict, fields
from pathlib import Path

import yaml

from .core import NormalRangeParams, TrendParams
from .models import FeatureSpec
from .simulator import DEFAULT_COEFFICIENTS, EventConfig, SimConfig
from .training import LOSS_TERMS, LossConfig, ModelRecipe, TermPhase, WarmStartSchedule
from .utility import SIMULATION_RANGE

_PHASE_DEFAULTS = {"term": "trend_dev", "lambda_start": 0.5, "lambda_end": 5.0,
                   "escalation_steps": 20, "auto_balance": False}


def _event_defaults() -> dict:
    return {f.name: getattr(EventConfig(), f.name) for f in fields(EventConfig)}


def default_config() -> dict:
    sim = SimConfig()
    sched = WarmStartSchedule()
    return {
        "seed": 0,
        "simulate": {
            "n_patients": sim.n_patients,
            "n_steps": sim.n_steps,
            "age_range": list(sim.age_range),
            "noise_std": sim.noise_std,
            "frequencies": list(sim.frequencies),
            "coefficients": dict(DEFAULT_COEFFICIENTS),
            "events": _event_defaults(),
        },
        "model": {
            "kind": "gradient_net",
            "hidden": 8,
            "ridge_strength": 1.0,
            "features": {"target": "s3", "aux_signals": ["s1", "s2"], "lags": 3},
        },
        "loss": {
            "range": asdict(SIMULATION_RANGE),
            "trend": asdict(TrendParams()),
            "include": list(LOSS_TERMS),
        },
        "schedule": {
            "warm_epochs": sched.warm_epochs,
            "patience": sched.patience,
            "relative_tolerance": sched.relative_tolerance,
            "learning_rate": sched.learning_rate,
            "batch_size": sched.batch_size,
            "max_epochs": sched.max_epochs,
            "phases": [],
        },
        "evaluate": {"pooling": "event", "histogram_bins": 10},
    }


class ConfigError(ValueError):
    def __init__(self, source, line, message):
        self.source, self.line = str(source), line
        where = self.source if line is None else f"{self.source}:{line}"
        super().__init__(f"{where}: {message}")


def _line(node):
    return node.start_mark.line + 1 if node is not None else None


def _merge(node, default, source, path, lines):
    """Overlay a YAML node onto the defaults, rejecting unknown keys."""
    label = ".".join(path) or "<root>"
    lines[label] = _line(node)
    if isinstance(default, dict):
        if not isinstance(node, yaml.MappingNode):
            raise ConfigError(source, _line(node), f"{label} must be a mapping")
        out = copy.deepcopy(default)
        for key_node, value_node in node.value:
            key = key_node.value
            if key not in default:
                raise ConfigError(source, _line(key_node), f"unknown key {'.'.join(path + [key])!r}")
            out[key] = _merge(value_node, default[key], source, path + [key], lines)
        return out
    if path and path[-1] == "phases":
        if not isinstance(node, yaml.SequenceNode):
            raise ConfigError(source, _line(node), "schedule.phases must be a list")
        return [_merge(item, _PHASE_DEFAULTS, source, path + [str(i)], lines)
                for i, item in enumerate(node.value)]
    if isinstance(node, (yaml.MappingNode,)):
        raise ConfigError(source, _line(node), f"{label} must not be a mapping")
    value = yaml.safe_load(yaml.serialize(node))
    # YAML 1.1 reads "7e-4" as a string; accept it where a number is expected.
    if isinstance(default, (int, float)) and not isinstance(default, bool) and isinstance(value, str):
        try:
            value = float(value)
        except ValueError:
            raise ConfigError(source, _line(node), f"{label} must be a number") from None
    return value


def load_config(path=None, overrides: dict | None = None) -> tuple[dict, dict]:
    """Return the merged config and a map from dotted key to source line."""
    lines: dict[str, int | None] = {}
    config = default_config()
    source = "<defaults>"
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(source, None, f"cannot read config: {exc.strerror}") from None
        try:
            node = yaml.compose(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(source, mark.line + 1 if mark else None, f"invalid YAML: {exc}") from None
        if node is not None:
            config = _merge(node, config, source, [], lines)
    for key, value in (overrides or {}).items():
        if value is not None:
            config[key] = value
    validate(config, source, lines)
    return config, lines


def _section(config, lines, source, label, build):
    try:
        return build()
    except (TypeError, ValueError, KeyError) as exc:
        # Point at the offending key when the message names one.
        line = lines.get(label)
        for key, key_line in lines.items():
            if key.startswith(label + ".") and key.rsplit(".", 1)[-1] in str(exc):
                line = key_line
                break
        raise ConfigError(source, line, f"invalid {label}: {exc}") from None


def sim_config(config: dict, source="<config>", lines=None) -> SimConfig:
    s = config["simulate"]
    lines = lines or {}
    events = _section(config, lines, source, "simulate.events", lambda: EventConfig(**s["events"]))
    return _section(config, lines, source, "simulate", lambda: SimConfig(
        n_patients=int(s["n_patients"]), n_steps=int(s["n_steps"]), age_range=tuple(s["age_range"]),
        coefficients=dict(s["coefficients"]), frequencies=tuple(s["frequencies"]),
        noise_std=float(s["noise_std"]), events=events, seed=int(config["seed"]),
    ))


def loss_config(config: dict, source="<config>", lines=None) -> LossConfig:
    lines = lines or {}
    l = config["loss"]
    rp = _section(config, lines, source, "loss.range", lambda: NormalRangeParams(**l["range"]))
    tp = _section(config, lines, source, "loss.trend", lambda: TrendParams(**l["trend"]))
    return _section(config, lines, source, "loss", lambda: LossConfig(rp, tp, include=tuple(l["include"])))


def schedule(config: dict, source="<config>", lines=None) -> WarmStartSchedule:
    lines = lines or {}
    s = config["schedule"]
    phases = tuple(
        _section(config, lines, source, f"schedule.phases.{i}", lambda p=p: TermPhase(**p))
        for i, p in enumerate(s["phases"])
    )
    return _section(config, lines, source, "schedule", lambda: WarmStartSchedule(
        warm_epochs=int(s["warm_epochs"]), phases=phases, patience=int(s["patience"]),
        relative_tolerance=float(s["relative_tolerance"]), learning_rate=float(s["learning_rate"]),
        batch_size=int(s["batch_size"]), max_epochs=int(s["max_epochs"]), seed=int(config["seed"]),
    ))


def recipe(config: dict, source="<config>", lines=None) -> ModelRecipe:
    lines = lines or {}
    m = config["model"]
    spec = _section(config, lines, source, "model.features", lambda: FeatureSpec(
        m["features"]["target"], tuple(m["features"]["aux_signals"]), int(m["features"]["lags"])))
    if m["kind"] not in ("persistence", "linear_ar", "ridge_ar", "gradient_net"):
        raise ConfigError(source, lines.get("model.kind"), f"unknown model kind {m['kind']!r}")
    return ModelRecipe(m["kind"], int(m["hidden"]), float(m["ridge_strength"]), spec,
                       schedule(config, source, lines), loss_config(config, source, lines))


def validate(config: dict, source="<config>", lines=None) -> None:
    lines = lines or {}
    if not isinstance(config["seed"], int) or isinstance(config["seed"], bool):
        raise ConfigError(source, lines.get("seed"), "seed must be an integer")
    sim_config(config, source, lines)
    recipe(config, source, lines)
    ev = config["evaluate"]
    if ev["pooling"] not in ("event", "point"):
        raise ConfigError(source, lines.get("evaluate.pooling"), "pooling must be 'event' or 'point'")
    if not isinstance(ev["histogram_bins"], int) or ev["histogram_bins"] < 1:
        raise ConfigError(source, lines.get("evaluate.histogram_bins"), "histogram_bins must be a positive integer")


def dump_config(config: dict, path) -> None:
    Path(path).write_text(yaml.safe_dump(config, sort_keys=True, default_flow_style=None))
