"""Clinically weighted utility costs for vital-sign prediction.

Metrics and training losses for normal-range, trend and trend-deviation
utility, a synthetic vital-sign simulator, forecasting baselines, a
warm-start trainer and event-window evaluation.
"""

from .core import (
    AlignedPair,
    EventAnnotation,
    NormalRangeParams,
    PredictionSeries,
    TrendParams,
    VitalSeries,
    align,
    rmse,
    window_rmse,
)
from .utility import (
    TrendTriple,
    UtilityBreakdown,
    aggregate,
    normal_range_cost,
    ols_slope,
    trend_cost,
    trend_deviation_cost,
    trend_triple,
    two_sided_sigmoid,
)

__version__ = "0.1.0"
