"""Student-t tail probabilities via the regularized incomplete beta, paired t-test, Spearman."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


class StatsError(ValueError):
    pass


class ZeroVariance(StatsError):
    pass


class TooFewSamples(StatsError):
    pass


class DegenerateInput(StatsError):
    pass


_TINY = 1e-300


def _beta_cf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-16) -> float:
    """Continued fraction for I_x(a, b) (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _TINY else _TINY)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise StatsError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def betainc(a: float, b: float, x: float, x_complement: float | None = None) -> float:
    """Regularized incomplete beta function I_x(a, b).

    ``x_complement`` may carry an accurately computed ``1 - x`` for x near 1.
    """
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    xc = 1.0 - x if x_complement is None else x_complement
    if x == 0.0 or xc == 0.0:
        return 0.0 if x == 0.0 else 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log(xc))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, xc) / b


def t_two_sided_p(t: float, df: float) -> float:
    if df <= 0:
        raise ValueError("df must be positive")
    if math.isinf(t):
        return 0.0
    t2 = t * t
    return min(1.0, betainc(df / 2.0, 0.5, df / (df + t2), t2 / (df + t2)))


def t_cdf(t: float, df: float) -> float:
    tail = 0.5 * t_two_sided_p(t, df)
    return 1.0 - tail if t > 0 else tail


def paired_t_test(differences: Sequence[float]) -> tuple[float, float]:
    """One-sample t-test of the paired differences against 0; returns (t, two-sided p)."""
    d = np.asarray(differences, dtype=np.float64)
    n = d.size
    if n < 2:
        raise TooFewSamples("need at least two differences")
    sd = d.std(ddof=1)
    if sd == 0:
        raise ZeroVariance("all differences are equal")
    t = float(d.mean() / (sd / math.sqrt(n)))
    return t, t_two_sided_p(t, n - 1)


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise DegenerateInput("need two equal-length sequences of at least two values")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise DegenerateInput("a constant sequence has no rank correlation")
    rx = rankdata(x) - (x.size + 1) / 2
    ry = rankdata(y) - (y.size + 1) / 2
    return float(np.clip(rx @ ry / math.sqrt((rx @ rx) * (ry @ ry)), -1.0, 1.0))
