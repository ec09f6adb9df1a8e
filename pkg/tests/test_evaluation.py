import math

import numpy as np
import pytest

from clinutility.core import EventAnnotation, PredictionSeries, TrendParams, VitalSeries, align, rmse, window_rmse
from clinutility.evaluation import (
    MissingMetric,
    compare_on_events,
    cost_rank_correlations,
    evaluate,
    rank_models,
    summarize_reports,
)
from clinutility.simulator import generate_dataset
from clinutility.utility import SIMULATION_RANGE, UtilityBreakdown, aggregate

from conftest import small_sim

TP = TrendParams(3, 2)


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(small_sim(n_patients=6, n_steps=150, seed=12))


def noisy(series, scale, seed, model_id):
    r = np.random.default_rng(seed)
    return PredictionSeries(series.patient_id, series.signal_name, series.indices,
                            series.values + r.normal(scale=scale, size=len(series)), model_id=model_id)


def truth_of(ds):
    return [p.signals["s3"] for p in ds.patients]


def s3_events(ds):
    return [e for e in ds.events() if e.signal_name == "s3"]


def test_perfect_predictions(dataset):
    truth = truth_of(dataset)
    preds = [PredictionSeries(t.patient_id, t.signal_name, t.indices, t.values, model_id="stub") for t in truth]
    rep = evaluate(truth, preds, s3_events(dataset), SIMULATION_RANGE, TP)
    assert rep.overall_rmse == 0.0
    assert rep.utility.mean_range_cost == 0.0
    assert rep.utility.mean_trend_cost == 0.0
    assert rep.utility.mean_trend_dev_cost == 0.0
    assert rep.per_event_type
    assert all(s.mean_rmse == 0.0 for s in rep.per_event_type.values())


def test_no_annotations(dataset):
    truth = truth_of(dataset)
    rep = evaluate(truth, [noisy(t, 1.0, 0, "m") for t in truth], [], SIMULATION_RANGE, TP)
    assert rep.per_event_type == {}
    assert rep.overall_rmse > 0 and rep.utility.mean_range_cost is not None
    with pytest.raises(MissingMetric):
        rep.metric("window_rmse:surge")


def test_matches_manual_composition(dataset):
    truth = truth_of(dataset)
    events = s3_events(dataset)
    for k, scale in enumerate((0.5, 1.0, 2.0)):
        preds = [noisy(t, scale, 10 * k + i, f"m{k}") for i, t in enumerate(truth)]
        rep = evaluate(truth, preds, events, SIMULATION_RANGE, TP)
        sq, n = 0.0, 0
        parts = []
        for t, p in zip(truth, preds):
            pair = align(t, p)
            sq += rmse(pair) ** 2 * pair.indices.size
            n += pair.indices.size
            parts.append(aggregate(t, p, SIMULATION_RANGE, TP))
        assert rep.overall_rmse == pytest.approx(math.sqrt(sq / n), rel=1e-12)
        pooled = UtilityBreakdown.pooled(parts)
        assert rep.utility.mean_range_cost == pytest.approx(pooled.mean_range_cost, rel=1e-12)
        assert rep.utility.mean_trend_cost == pytest.approx(pooled.mean_trend_cost, rel=1e-12)
        assert rep.utility.mean_trend_dev_cost == pytest.approx(pooled.mean_trend_dev_cost, rel=1e-12)
        by_id = {t.patient_id: (t, p) for t, p in zip(truth, preds)}
        for kind, stats in rep.per_event_type.items():
            vals = [window_rmse(align(*by_id[e.patient_id]), e) for e in events if e.event_type == kind]
            assert stats.mean_rmse == pytest.approx(np.mean(vals), rel=1e-12)
            assert stats.count == len(vals)


def test_point_pooling(dataset):
    truth = truth_of(dataset)
    events = [e for e in s3_events(dataset) if e.event_type == "range"]
    preds = [noisy(t, 1.0, i, "m") for i, t in enumerate(truth)]
    rep = evaluate(truth, preds, events, SIMULATION_RANGE, TP, pooling="point")
    by_id = {t.patient_id: (t, p) for t, p in zip(truth, preds)}
    sq, n = 0.0, 0
    for e in events:
        t, p = by_id[e.patient_id]
        err = t.values[e.start_index:e.end_index + 1] - p.values[e.start_index:e.end_index + 1]
        sq += float(err @ err)
        n += err.size
    assert rep.per_event_type["range"].mean_rmse == pytest.approx(math.sqrt(sq / n))


def test_order_invariance(dataset):
    truth = truth_of(dataset)
    preds = [noisy(t, 1.0, i, "m") for i, t in enumerate(truth)]
    events = s3_events(dataset)
    a = evaluate(truth, preds, events, SIMULATION_RANGE, TP)
    b = evaluate(truth[::-1], preds[::-1], events[::-1], SIMULATION_RANGE, TP)
    assert a.metrics() == b.metrics()


def _surge_case():
    # A is accurate except just before the jump, where the trend surprise is largest;
    # B is uniformly noisier.
    y = np.zeros(60)
    y[30:36] = 8.0
    truth = VitalSeries.from_values("p", "s", y)
    early = y + 0.1 * np.sin(np.arange(60) * 0.9)
    early[28:30] += 4.0
    noisy_everywhere = y + 1.5 * np.sin(np.arange(60) * 1.7)
    a = PredictionSeries("p", "s", np.arange(60), early, model_id="a_early_miss")
    b = PredictionSeries("p", "s", np.arange(60), noisy_everywhere, model_id="b_noisy")
    return truth, a, b, [EventAnnotation("p", "s", 28, 35, "surge")]


def test_rankings_differ_by_criterion():
    truth, a, b, events = _surge_case()
    reports = [evaluate([truth], [p], events, SIMULATION_RANGE, TP) for p in (a, b)]
    assert rank_models(reports, "rmse") == ["a_early_miss", "b_noisy"]
    assert rank_models(reports, "trend_dev") == ["b_noisy", "a_early_miss"]


def test_rank_single_and_ties(dataset):
    truth = truth_of(dataset)[:1]
    preds = [noisy(truth[0], 1.0, 0, "z")]
    rep = evaluate(truth, preds, [], SIMULATION_RANGE, TP)
    assert rank_models([rep], "rmse") == ["z"]
    twin_b = evaluate(truth, [noisy(truth[0], 1.0, 0, "b")], [], SIMULATION_RANGE, TP, model_id="b")
    twin_a = evaluate(truth, [noisy(truth[0], 1.0, 0, "a")], [], SIMULATION_RANGE, TP, model_id="a")
    assert rank_models([twin_b, twin_a], "trend") == ["a", "b"]


def test_paired_comparison_direction():
    truth, a, b, events = _surge_case()
    events = events + [EventAnnotation("p", "s", 10, 14, "surge"), EventAnnotation("p", "s", 29, 33, "surge")]
    comp = compare_on_events([truth], [a], [b], events)
    assert comp.n_events == 3
    np.testing.assert_allclose(comp.differences, comp.rmse_b - comp.rmse_a)
    assert comp.model_a == "a_early_miss" and comp.model_b == "b_noisy"


def test_summaries_and_correlations(dataset):
    truth = truth_of(dataset)
    events = s3_events(dataset)
    reports = [evaluate(truth, [noisy(t, s, i, f"m{s}") for i, t in enumerate(truth)], events,
                        SIMULATION_RANGE, TP) for s in (0.3, 1.0, 3.0, 6.0)]
    summary = summarize_reports(reports)
    vals = [r.overall_rmse for r in reports]
    assert summary["overall_rmse"] == pytest.approx((np.mean(vals), np.std(vals, ddof=1)))
    corr = cost_rank_correlations(reports)
    assert corr["range"] == 1.0
