"""Command-line entry point: ``simulate``, ``train`` and ``evaluate``.

Exit codes: 0 ok, 2 config error, 3 training divergence, 4 data schema error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfg
from .core import EmptyAlignment
from .evaluation import CRITERIA, EvaluationError, MissingMetric, compare_on_events, evaluate, rank_models
from .io import (
    SchemaError,
    group_by_patient,
    load_model,
    read_annotations_csv,
    read_series_csv,
    save_model,
    write_annotations_csv,
    write_rows,
    write_series_csv,
)
from .models import predict_series
from .simulator import generate_dataset
from .stats import StatsError
from .training import UTILITY_TERMS, DivergedLoss, NonGradientModel, TrainingHistory, fit_model, train
from .utility import UtilityBreakdown

log = logging.getLogger("clinutility")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_SCHEMA = 0, 2, 3, 4
EFFECTIVE_CONFIG = "effective_config.yaml"


def _prepare(args):
    config, lines = cfg.load_config(args.config, {"seed": args.seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump_config(config, out / EFFECTIVE_CONFIG)
    return config, lines, out


def cmd_simulate(args) -> int:
    config, lines, out = _prepare(args)
    sim = cfg.sim_config(config, args.config or "<defaults>", lines)
    dataset = generate_dataset(sim, threads=args.threads)
    write_series_csv(out / "series.csv", dataset.series())
    write_annotations_csv(out / "events.csv", dataset.events(include_range=False))
    write_annotations_csv(out / "range_events.csv", [e for p in dataset.patients for e in p.range_events])
    write_rows(out / "patients.csv", ("patient_id", "age", "group"),
               ((p.patient_id, p.age, p.group) for p in dataset.patients))
    s = dataset.summary
    text = [
        f"patients: {s.n_patients}",
        f"steps: {sim.n_steps}",
        f"mean_injected_events_per_patient: {s.mean_injected_per_patient!r}",
        f"expected_injected_events_per_patient: {s.expected_injected_per_patient!r}",
        f"mean_range_events_per_patient: {s.mean_range_per_patient!r}",
    ]
    text += [f"injected[{k}]: {v}" for k, v in s.injected_counts.items()]
    text += [f"range[{k}]: {v}" for k, v in s.range_counts.items()]
    (out / "summary.txt").write_text("\n".join(text) + "\n")
    print(f"wrote {s.n_patients} patients to {out}")
    return EXIT_OK


def _patients(path, spec):
    grouped = group_by_patient(read_series_csv(path))
    missing = [(pid, name) for pid, sig in grouped.items() for name in spec.signals if name not in sig]
    if missing:
        pid, name = missing[0]
        raise SchemaError(path, None, "signal", f"patient {pid} lacks signal {name!r}")
    return [grouped[pid] for pid in sorted(grouped)]


def cmd_train(args) -> int:
    config, lines, out = _prepare(args)
    recipe = cfg.recipe(config, args.config or "<defaults>", lines)
    seed = int(config["seed"])
    records = []
    if args.model:
        model = load_model(args.model)
        recipe_spec = model.feature_spec
    else:
        model = None
        recipe_spec = recipe.feature_spec
    patients = _patients(args.data, recipe_spec)
    try:
        if model is not None:
            params, history = train(model, patients, recipe.schedule, recipe.loss, callback=records.append)
        else:
            params, history = fit_model(recipe, patients, seed=seed, callback=records.append)
    except DivergedLoss as exc:
        history = TrainingHistory(records)
        write_rows(out / "history.csv", TrainingHistory.header, history.rows())
        print(f"error: {exc}; last good epoch {exc.last_good_epoch}", file=sys.stderr)
        return EXIT_DIVERGED
    save_model(out / "model.json", params)
    history = history or TrainingHistory()
    write_rows(out / "history.csv", TrainingHistory.header, history.rows())
    print(f"trained {params.kind} for {len(history)} epochs; model written to {out / 'model.json'}")
    return EXIT_OK


def model_ids(paths) -> list[str]:
    """File stems, or parent directory names when stems collide (e.g. run_a/model.json)."""
    paths = [Path(p) for p in paths]
    stems = [p.stem for p in paths]
    names = stems if len(set(stems)) == len(stems) else [p.parent.name or p.stem for p in paths]
    out, seen = [], set()
    for name in names:
        base, k = name, 2
        while name in seen:
            name = f"{base}_{k}"
            k += 1
        seen.add(name)
        out.append(name)
    return out


def _predictions(path: Path, model_id: str, patients, threads: int):
    if path.suffix.lower() == ".csv":
        return read_series_csv(path, model_id=model_id)
    params = load_model(path)
    missing = [name for name in params.feature_spec.signals if any(name not in p for p in patients)]
    if missing:
        raise SchemaError(path, None, "feature_aux_signals", f"data lacks signal {missing[0]!r}")

    def one(signals):
        return predict_series(params, signals, model_id)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, patients))
    return [one(p) for p in patients]


def _report_rows(report):
    rows = [(report.model_id, "overall_rmse", report.overall_rmse, report.n_points)]
    u: UtilityBreakdown = report.utility
    rows += [
        (report.model_id, "range", u.mean_range_cost, u.range_count),
        (report.model_id, "trend", u.mean_trend_cost, u.trend_count),
        (report.model_id, "trend_dev", u.mean_trend_dev_cost, u.trend_dev_count),
    ]
    for kind, stats in sorted(report.per_event_type.items()):
        rows.append((report.model_id, f"window_rmse:{kind}", stats.mean_rmse, stats.count))
        for cost in UTILITY_TERMS:
            rows.append((report.model_id, f"window_{cost}:{kind}", stats.costs.get(cost), stats.count))
    rows.append((report.model_id, "skipped_windows", report.skipped_windows, None))
    return rows


def cmd_evaluate(args) -> int:
    config, lines, out = _prepare(args)
    loss = cfg.loss_config(config, args.config or "<defaults>", lines)
    series = read_series_csv(args.data)
    patients = [group_by_patient(series)[pid] for pid in sorted(group_by_patient(series))]
    truth = {(s.patient_id, s.signal_name): s for s in series}
    annotations = [e for path in args.annotations or () for e in read_annotations_csv(path)]
    model_preds = []
    for path, mid in zip(map(Path, args.model), model_ids(args.model)):
        preds = [p for p in _predictions(path, mid, patients, args.threads) if len(p)]
        model_preds.append((mid, preds))
    pooling = config["evaluate"]["pooling"]
    reports = []
    for mid, preds in model_preds:
        try:
            reports.append(evaluate(truth, preds, annotations, loss.range_params, loss.trend_params,
                                    pooling=pooling, model_id=mid))
        except (EmptyAlignment, EvaluationError) as exc:
            raise SchemaError(args.data, None, None, f"model {mid}: {exc}") from None
    write_rows(out / "reports.csv", ("model_id", "metric", "value", "count"),
               (row for r in reports for row in _report_rows(r)))
    write_rows(out / "plot_utility.csv", ("model_id", "overall_rmse", "range", "trend", "trend_dev"),
               ((r.model_id, r.overall_rmse, r.utility.mean_range_cost, r.utility.mean_trend_cost,
                 r.utility.mean_trend_dev_cost) for r in reports))
    kinds = sorted({k for r in reports for k in r.per_event_type})
    write_rows(out / "plot_event_windows.csv",
               ("event_type", "model_id", "window_rmse", "window_range", "window_trend", "window_trend_dev", "count"),
               ((k, r.model_id, r.per_event_type[k].mean_rmse, *(r.per_event_type[k].costs.get(c) for c in UTILITY_TERMS),
                 r.per_event_type[k].count) for k in kinds for r in reports if k in r.per_event_type))
    ranking_rows = []
    for criterion in list(CRITERIA) + [f"window_rmse:{k}" for k in kinds]:
        try:
            order = rank_models(reports, criterion)
        except MissingMetric:
            continue
        ranking_rows += [(criterion, i + 1, mid) for i, mid in enumerate(order)]
    write_rows(out / "rankings.csv", ("criterion", "rank", "model_id"), ranking_rows)
    if annotations and len(model_preds) == 2:
        (a_id, a_preds), (b_id, b_preds) = model_preds
        try:
            comp = compare_on_events(truth, a_preds, b_preds, annotations)
        except StatsError as exc:
            log.warning("paired comparison skipped: %s", exc)
        else:
            write_rows(out / "paired.csv",
                       ("model_a", "model_b", "n_events", "mean_difference", "t_statistic", "p_value"),
                       [(a_id, b_id, comp.n_events, float(comp.differences.mean()), comp.t_statistic, comp.p_value)])
            write_rows(out / "paired_events.csv",
                       ("patient_id", "signal", "start_index", "end_index", "event_type", "rmse_a", "rmse_b", "difference"),
                       ((e.patient_id, e.signal_name, e.start_index, e.end_index, e.event_type, ra, rb, rb - ra)
                        for e, ra, rb in zip(comp.events, comp.rmse_a, comp.rmse_b)))
            counts, edges = np.histogram(comp.differences, bins=config["evaluate"]["histogram_bins"])
            write_rows(out / "plot_paired_hist.csv", ("bin_left", "bin_right", "count"),
                       zip(edges[:-1], edges[1:], counts))
    print(f"evaluated {len(reports)} model(s); reports written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clinutility", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file (defaults used when omitted)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads for per-patient stages")

    p = sub.add_parser("simulate", help="generate the synthetic vital-sign dataset")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="fit a model on a series CSV")
    common(p)
    p.add_argument("--data", required=True, help="series CSV")
    p.add_argument("--model", help="resume from this model file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate model files or prediction CSVs")
    common(p)
    p.add_argument("--data", required=True, help="truth series CSV")
    p.add_argument("--model", action="append", required=True,
                   help="model file (.json) or prediction CSV; repeat for several models")
    p.add_argument("--annotations", action="append",
                   help="annotation CSV of event windows; repeat to combine files")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (cfg.ConfigError, NonGradientModel) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA


if __name__ == "__main__":
    sys.exit(main())
