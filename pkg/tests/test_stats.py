import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from clinutility.stats import (
    DegenerateInput,
    TooFewSamples,
    ZeroVariance,
    betainc,
    paired_t_test,
    spearman,
    t_cdf,
    t_two_sided_p,
)


def t_p_by_quadrature(t, df):
    mpmath.mp.dps = 30
    df = mpmath.mpf(df)
    c = mpmath.gamma((df + 1) / 2) / (mpmath.sqrt(df * mpmath.pi) * mpmath.gamma(df / 2))
    tail = mpmath.quad(lambda x: c * (1 + x * x / df) ** (-(df + 1) / 2), [abs(t), mpmath.inf])
    return float(2 * tail)


def test_symmetric_differences():
    t, p = paired_t_test([-1, 1, -2, 2])
    assert t == 0.0 and p == 1.0


def test_hand_computed_t():
    t, p = paired_t_test([-1, 0, 1, 2])
    assert t == pytest.approx(0.5 / (math.sqrt(5 / 3) / 2), rel=1e-12)
    assert t == pytest.approx(0.7746, abs=1e-4)
    assert p == pytest.approx(t_p_by_quadrature(t, 3), abs=1e-10)
    # Published df=3 table: t=0.765 at two-sided 0.50, so p is just below 0.5.
    assert 0.48 < p < 0.50


@pytest.mark.parametrize("t,expected", [(0.765, 0.50), (2.353, 0.10), (3.182, 0.05), (4.541, 0.02), (5.841, 0.01)])
def test_table_values_df3(t, expected):
    assert t_two_sided_p(t, 3) == pytest.approx(expected, abs=1e-3)


@pytest.mark.parametrize("t,df,expected", [(2.228, 10, 0.05), (1.96, 1e6, 0.05), (2.576, 1e6, 0.01), (12.706, 1, 0.05)])
def test_table_values_other_df(t, df, expected):
    assert t_two_sided_p(t, df) == pytest.approx(expected, abs=1e-3)


def test_reported_pairing_consistency():
    p = t_two_sided_p(-1.96, 93)
    assert 0.050 <= p <= 0.056


@settings(max_examples=100, deadline=None)
@given(st.floats(-30, 30), st.floats(1, 500))
def test_p_matches_scipy(t, df):
    assert t_two_sided_p(t, df) == pytest.approx(2 * sps.t.sf(abs(t), df), rel=1e-9, abs=1e-300)
    assert t_cdf(t, df) == pytest.approx(sps.t.cdf(t, df), rel=1e-9, abs=1e-300)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 50), st.floats(0.1, 50), st.floats(0, 1))
def test_betainc_matches_mpmath(a, b, x):
    expected = float(mpmath.betainc(a, b, 0, x, regularized=True))
    assert betainc(a, b, x) == pytest.approx(expected, rel=1e-9, abs=1e-14)


def test_antisymmetry_and_monotone(rng):
    d = rng.normal(size=30) + 0.2
    t1, p1 = paired_t_test(d)
    t2, p2 = paired_t_test(-d)
    assert t1 == -t2 and p1 == p2
    ps = [t_two_sided_p(t, 12) for t in np.linspace(0, 8, 50)]
    assert all(a > b for a, b in zip(ps, ps[1:]))


def test_t_test_errors():
    with pytest.raises(TooFewSamples):
        paired_t_test([1.0])
    with pytest.raises(ZeroVariance):
        paired_t_test([2.0, 2.0, 2.0])


def test_spearman_examples():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0
    assert spearman([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)
    with pytest.raises(DegenerateInput):
        spearman([1, 1, 1], [1, 2, 3])


def test_spearman_matches_scipy(rng):
    x, y = rng.normal(size=25), rng.normal(size=25)
    x[3] = x[4]
    assert spearman(x, y) == pytest.approx(sps.spearmanr(x, y).statistic, rel=1e-12)
