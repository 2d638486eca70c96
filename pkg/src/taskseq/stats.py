"""Pearson correlation, its two-sided t-test, and OLS fits with confidence bands."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as _sps

_TINY = 1e-300


@dataclass(frozen=True)
class PairedSample:
    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=np.float64).ravel()
        ys = np.asarray(self.ys, dtype=np.float64).ravel()
        if len(xs) != len(ys):
            raise ValueError(f"paired sample lengths differ: {len(xs)} vs {len(ys)}")
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
            raise ValueError("paired sample contains non-finite values")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    def __len__(self):
        return len(self.xs)


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    p: float
    m: int

    @property
    def significant(self) -> bool:
        return self.p < 0.05


@dataclass(frozen=True)
class RegressionFit:
    slope: float
    intercept: float
    x_mean: float
    sxx: float
    resid_std: float
    t_crit: float
    m: int

    def predict(self, x):
        return self.intercept + self.slope * np.asarray(x, dtype=np.float64)

    def band(self, x):
        """Half-width of the confidence interval of the mean response at ``x``."""
        x = np.asarray(x, dtype=np.float64)
        return self.t_crit * self.resid_std * np.sqrt(1.0 / self.m + (x - self.x_mean) ** 2 / self.sxx)


def _as_sample(sample, ys=None) -> PairedSample:
    if isinstance(sample, PairedSample):
        return sample
    return PairedSample(sample, ys)


def pearson_r(sample, ys=None) -> float:
    s = _as_sample(sample, ys)
    if len(s) < 2:
        raise ValueError("need at least two pairs")
    dx = s.xs - s.xs.mean()
    dy = s.ys - s.ys.mean()
    sxx, syy = np.dot(dx, dx), np.dot(dy, dy)
    if np.ptp(s.xs) == 0.0 or np.ptp(s.ys) == 0.0:
        raise ValueError("correlation undefined: a variable has zero variance")
    r = np.dot(dx, dy) / math.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


def _betacf(a: float, b: float, x: float, tol: float = 1e-15, max_iter: int = 10000) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
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
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not (a > 0 and b > 0):
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def p_value_two_sided(r: float, m: int) -> float:
    """Two-sided p-value of the t-test for zero correlation with m - 2 degrees of freedom."""
    if m < 3:
        raise ValueError("significance needs at least three pairs")
    if not -1.0 <= r <= 1.0:
        raise ValueError("r must lie in [-1, 1]")
    if abs(r) == 1.0:
        return 0.0
    df = m - 2
    # P(|T| > |t|) = I_{df/(df+t^2)}(df/2, 1/2), and df/(df+t^2) simplifies to 1 - r^2
    return float(min(1.0, max(0.0, betainc_regularized(df / 2.0, 0.5, 1.0 - r * r))))


def correlate(sample, ys=None) -> CorrelationResult:
    s = _as_sample(sample, ys)
    r = pearson_r(s)
    return CorrelationResult(r, p_value_two_sided(r, len(s)), len(s))


def linear_fit_with_ci(sample, ys=None, confidence: float = 0.95) -> RegressionFit:
    s = _as_sample(sample, ys)
    m = len(s)
    if m < 3:
        raise ValueError("a fit with a confidence band needs at least three points")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    x_mean = s.xs.mean()
    dx = s.xs - x_mean
    sxx = float(np.dot(dx, dx))
    if np.ptp(s.xs) == 0.0:
        raise ValueError("x values are all equal; the fit is undefined")
    slope = float(np.dot(dx, s.ys - s.ys.mean()) / sxx)
    intercept = float(s.ys.mean() - slope * x_mean)
    resid = s.ys - (intercept + slope * s.xs)
    resid_std = math.sqrt(float(np.dot(resid, resid)) / (m - 2))
    t_crit = float(_sps.t.ppf(0.5 + confidence / 2.0, m - 2))
    return RegressionFit(slope, intercept, float(x_mean), sxx, resid_std, t_crit, m)
