"""Regression statistics: OLS with Student-t p-values, Spearman, sign test."""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRegressionError

_CF_TOL = 1e-15
_CF_MAX_ITER = 10000
_TINY = 1e-300


@dataclass(frozen=True)
class RegressionResult:
    slope: float
    intercept: float
    r_squared: float
    p_value: float
    n: int

    def as_row(self) -> list:
        return [self.slope, self.intercept, self.r_squared, self.p_value, self.n]


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_TOL:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc needs a, b > 0")
    if not 0.0 <= x <= 1.0:
        raise ValueError("betainc needs x in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def t_cdf(t: float, dof: float) -> float:
    """CDF of Student's t distribution."""
    if dof <= 0:
        raise ValueError("dof must be positive")
    if math.isinf(t):
        return 1.0 if t > 0 else 0.0
    x = dof / (dof + t * t)
    tail = 0.5 * betainc(dof / 2.0, 0.5, x)
    return 1.0 - tail if t > 0 else tail


def t_two_sided_p(t: float, dof: float) -> float:
    """P(|T| >= |t|)."""
    if math.isinf(t):
        return 0.0
    return betainc(dof / 2.0, 0.5, dof / (dof + t * t))


def ols_regress(x, y) -> RegressionResult:
    """Simple linear regression of ``y`` on ``x`` with a two-sided slope test."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    if len(y) != n:
        raise DegenerateRegressionError(f"x and y lengths differ ({n} vs {len(y)})")
    if n < 3:
        raise DegenerateRegressionError(f"need at least 3 points, got {n}")
    xm, ym = x.mean(), y.mean()
    dx, dy = x - xm, y - ym
    sxx = float(dx @ dx)
    if sxx == 0.0 or np.all(x == x[0]):
        raise DegenerateRegressionError("regressor is constant")
    slope = float(dx @ dy) / sxx
    intercept = float(ym - slope * xm)
    resid = dy - slope * dx
    ss_res = float(resid @ resid)
    ss_tot = float(dy @ dy)
    r2 = 0.0 if ss_tot == 0.0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    dof = n - 2
    if ss_res == 0.0 or ss_tot == 0.0:
        p = 1.0 if slope == 0.0 else sys.float_info.min  # exact fit: smallest positive p
    else:
        se = math.sqrt(ss_res / dof / sxx)
        p = t_two_sided_p(slope / se, dof)
        p = min(1.0, max(p, sys.float_info.min))
    return RegressionResult(slope, intercept, r2, p, n)


def rankdata(values) -> np.ndarray:
    """Ranks starting at 1 with ties given their average rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> tuple[float, float]:
    """Spearman rho and its two-sided p-value from the t approximation."""
    rx, ry = rankdata(x), rankdata(y)
    n = len(rx)
    if n < 3:
        raise DegenerateRegressionError("need at least 3 points")
    dx, dy = rx - rx.mean(), ry - ry.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0.0:
        return 0.0, 1.0
    rho = float(dx @ dy) / denom
    if abs(rho) >= 1.0:
        return rho, sys.float_info.min
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return rho, max(t_two_sided_p(t, n - 2), sys.float_info.min)


def sign_test(differences) -> tuple[int, int, float]:
    """Exact two-sided binomial sign test; zeros are dropped.

    Returns (positives, non-zero count, p-value).
    """
    d = np.asarray(differences, dtype=np.float64)
    d = d[d != 0]
    n = len(d)
    k = int((d > 0).sum())
    if n == 0:
        return 0, 0, 1.0
    tail = min(k, n - k)
    p = 2.0 * sum(math.comb(n, i) for i in range(tail + 1)) / 2.0**n
    return k, n, min(1.0, p)
