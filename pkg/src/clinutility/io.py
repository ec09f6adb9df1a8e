"""CSV schemas for series, annotations, histories and reports; model parameter files."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import EVENT_TYPES, EventAnnotation, PredictionSeries, VitalSeries
from .models import MODEL_KINDS, FeatureSpec, ModelParams

log = logging.getLogger(__name__)

SERIES_HEADER = ("patient_id", "signal", "step_index", "value")
ANNOTATION_HEADER = ("patient_id", "signal", "start_index", "end_index", "event_type")
MODEL_FORMAT = "clinutility-model"
MODEL_VERSION = 1


class SchemaError(ValueError):
    """Input file violates its schema; carries file, line and column for the message."""

    def __init__(self, path, line: int | None, column: str | None, message: str):
        self.path, self.line, self.column = str(path), line, column
        where = self.path
        if line is not None:
            where += f":{line}"
        if column:
            where += f" [{column}]"
        super().__init__(f"{where}: {message}")


def fmt(value) -> str:
    """Round-trip float formatting; integers and strings pass through."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


def _writer(handle):
    return csv.writer(handle, lineterminator="\n")


def _check_header(path, reader, expected):
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError(path, 1, None, "empty file, expected a header") from None
    if tuple(h.strip() for h in header) != expected:
        raise SchemaError(path, 1, None, f"expected header {','.join(expected)}")


def _parse_int(path, line, column, text):
    try:
        return int(text)
    except ValueError:
        raise SchemaError(path, line, column, f"not an integer: {text!r}") from None


def write_series_csv(path, series: Iterable[VitalSeries]) -> None:
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(SERIES_HEADER)
        for s in series:
            for idx, val in zip(s.indices, s.values):
                w.writerow([s.patient_id, s.signal_name, int(idx), "" if np.isnan(val) else fmt(val)])


def read_series_csv(path, model_id: str | None = None) -> list[VitalSeries]:
    """Parse a series CSV; empty ``value`` cells become missing values.

    Rows may come in any order; they are sorted per series by index.
    """
    rows: dict[tuple[str, str], dict[int, float]] = defaultdict(dict)
    order: list[tuple[str, str]] = []
    unsorted = False
    last: dict[tuple[str, str], int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        _check_header(path, reader, SERIES_HEADER)
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise SchemaError(path, line, None, f"expected 4 columns, got {len(row)}")
            pid, signal, idx_text, val_text = row
            if not pid:
                raise SchemaError(path, line, "patient_id", "empty patient_id")
            if not signal:
                raise SchemaError(path, line, "signal", "empty signal")
            idx = _parse_int(path, line, "step_index", idx_text)
            if idx < 0:
                raise SchemaError(path, line, "step_index", "negative index")
            if val_text.strip() == "":
                val = math.nan
            else:
                try:
                    val = float(val_text)
                except ValueError:
                    raise SchemaError(path, line, "value", f"not a number: {val_text!r}") from None
                if not math.isfinite(val):
                    raise SchemaError(path, line, "value", "values must be finite (leave empty for missing)")
            key = (pid, signal)
            if key not in rows:
                order.append(key)
            if idx in rows[key]:
                raise SchemaError(path, line, "step_index", f"duplicate index {idx} for {pid}/{signal}")
            if key in last and idx < last[key]:
                unsorted = True
            last[key] = idx
            rows[key][idx] = val
    if unsorted:
        log.warning("%s: out-of-order step indices were sorted", path)
    out = []
    for key in order:
        items = sorted(rows[key].items())
        idx = np.array([i for i, _ in items], dtype=np.int64)
        vals = np.array([v for _, v in items], dtype=np.float64)
        if model_id is None:
            out.append(VitalSeries(key[0], key[1], idx, vals))
        else:
            out.append(PredictionSeries(key[0], key[1], idx, vals, model_id=model_id))
    return out


def write_annotations_csv(path, events: Iterable[EventAnnotation]) -> None:
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(ANNOTATION_HEADER)
        for e in events:
            w.writerow([e.patient_id, e.signal_name, e.start_index, e.end_index, e.event_type])


def read_annotations_csv(path) -> list[EventAnnotation]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        _check_header(path, reader, ANNOTATION_HEADER)
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise SchemaError(path, line, None, f"expected 5 columns, got {len(row)}")
            pid, signal, start_text, end_text, kind = row
            start = _parse_int(path, line, "start_index", start_text)
            end = _parse_int(path, line, "end_index", end_text)
            if kind not in EVENT_TYPES:
                raise SchemaError(path, line, "event_type", f"unknown event type {kind!r}")
            if start > end:
                raise SchemaError(path, line, "end_index", "end_index before start_index")
            out.append(EventAnnotation(pid, signal, start, end, kind))
    return out


def group_by_patient(series: Sequence[VitalSeries]) -> dict[str, dict[str, VitalSeries]]:
    out: dict[str, dict[str, VitalSeries]] = {}
    for s in series:
        out.setdefault(s.patient_id, {})[s.signal_name] = s
    return out


def write_rows(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


# --- model files ------------------------------------------------------------

def model_to_dict(params: ModelParams) -> dict:
    spec = params.feature_spec
    return {
        "format": MODEL_FORMAT,
        "format_version": MODEL_VERSION,
        "kind": params.kind,
        "activation": params.activation,
        "n_features": params.n_features,
        "hidden": params.hidden,
        "ridge_strength": params.ridge_strength,
        "epochs_trained": params.epochs_trained,
        "feature_target": spec.target,
        "feature_aux_signals": list(spec.aux_signals),
        "feature_lags": spec.lags,
        "w": params.w.tolist(),
        "b": params.b,
        "W1": params.W1.ravel().tolist(),
        "b1": params.b1.tolist(),
        "w2": params.w2.tolist(),
        "shift": params.shift.tolist(),
        "scale": params.scale.tolist(),
    }


def save_model(path, params: ModelParams) -> None:
    Path(path).write_text(json.dumps(model_to_dict(params), indent=1) + "\n")


def load_model(path) -> ModelParams:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(path, exc.lineno, None, f"invalid JSON: {exc.msg}") from None
    if not isinstance(data, dict) or data.get("format") != MODEL_FORMAT:
        raise SchemaError(path, None, "format", "not a model file")
    if data.get("format_version") != MODEL_VERSION:
        raise SchemaError(path, None, "format_version", f"unsupported version {data.get('format_version')!r}")
    if data.get("kind") not in MODEL_KINDS:
        raise SchemaError(path, None, "kind", f"unknown model kind {data.get('kind')!r}")
    try:
        d, h = int(data["n_features"]), int(data["hidden"])
        spec = FeatureSpec(data["feature_target"], tuple(data["feature_aux_signals"]), int(data["feature_lags"]))
        return ModelParams(
            data["kind"], d, np.array(data["w"]), data["b"], np.array(data["W1"]).reshape(h, d),
            np.array(data["b1"]), np.array(data["w2"]), np.array(data["shift"]), np.array(data["scale"]),
            float(data["ridge_strength"]), data["activation"], spec, int(data["epochs_trained"]),
        )
    except KeyError as exc:
        raise SchemaError(path, None, str(exc.args[0]), "missing key") from None
    except ValueError as exc:
        raise SchemaError(path, None, None, str(exc)) from None
