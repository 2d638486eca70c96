import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taskseq.stats import (
    PairedSample,
    betainc_regularized,
    correlate,
    linear_fit_with_ci,
    p_value_two_sided,
    pearson_r,
)


def oracle_r(xs, ys):
    mp.mp.dps = 50
    xs = [mp.mpf(float(v)) for v in xs]
    ys = [mp.mpf(float(v)) for v in ys]
    mx, my = mp.fsum(xs) / len(xs), mp.fsum(ys) / len(ys)
    num = mp.fsum((a - mx) * (b - my) for a, b in zip(xs, ys))
    return num / mp.sqrt(mp.fsum((a - mx) ** 2 for a in xs) * mp.fsum((b - my) ** 2 for b in ys))


def oracle_p(r, m):
    mp.mp.dps = 50
    df = m - 2
    r = mp.mpf(r)
    t2 = r * r * df / (1 - r * r)
    return mp.betainc(mp.mpf(df) / 2, mp.mpf(1) / 2, 0, df / (df + t2), regularized=True)


class TestPearson:
    def test_constant_with_rounding_mean(self):
        # the mean of six copies of 0.2 is not exactly 0.2
        with pytest.raises(ValueError):
            pearson_r(np.linspace(0, 1, 6), np.full(6, 0.2))

    def test_perfect(self, rng):
        x = rng.normal(size=10)
        assert pearson_r(x, x) == pytest.approx(1.0, abs=1e-15)
        assert pearson_r(x, -x) == pytest.approx(-1.0, abs=1e-15)

    def test_three_points(self):
        # frozen from a 40-digit evaluation
        assert pearson_r([1, 2, 3], [1, 2, 4]) == pytest.approx(0.9819805060619657157, abs=1e-15)

    def test_zero_variance(self):
        with pytest.raises(ValueError):
            pearson_r([1, 1, 1], [1, 2, 3])
        with pytest.raises(ValueError):
            pearson_r([1, 2, 3], [5, 5, 5])

    def test_affine_invariance(self, rng):
        x, y = rng.normal(size=(2, 40))
        r = pearson_r(x, y)
        assert abs(pearson_r(3.5 * x - 2.0, y) - r) < 1e-12
        assert abs(pearson_r(x, 0.01 * y + 100.0) - r) < 1e-12
        assert abs(pearson_r(x, -y) + r) < 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            PairedSample([1, 2, 3], [1, 2])


class TestPValue:
    def test_null(self):
        for m in (3, 10, 500):
            assert p_value_two_sided(0.0, m) == 1.0

    def test_moderate_correlation(self):
        # frozen from numerical integration of the Student-t density (df = 10)
        assert p_value_two_sided(0.5, 12) == pytest.approx(0.0978546142578125, abs=1e-12)
        assert round(p_value_two_sided(0.5, 12), 3) == 0.098

    def test_strong_correlation_large_sample(self):
        assert p_value_two_sided(0.86, 120) < 0.01

    def test_perfect_and_small(self):
        assert p_value_two_sided(1.0, 5) == 0.0
        assert p_value_two_sided(-1.0, 5) == 0.0
        with pytest.raises(ValueError):
            p_value_two_sided(0.3, 2)

    def test_monotone(self):
        ps = [p_value_two_sided(r, 30) for r in np.linspace(0, 0.99, 50)]
        assert all(a > b for a, b in zip(ps, ps[1:]))
        qs = [p_value_two_sided(0.3, m) for m in range(3, 100)]
        assert all(a > b for a, b in zip(qs, qs[1:]))

    def test_incomplete_beta_edges(self):
        assert betainc_regularized(2.0, 3.0, 0.0) == 0.0
        assert betainc_regularized(2.0, 3.0, 1.0) == 1.0
        assert betainc_regularized(1.0, 1.0, 0.3) == pytest.approx(0.3, abs=1e-15)
        with pytest.raises(ValueError):
            betainc_regularized(0.0, 1.0, 0.5)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.5, 300.0), st.floats(0.5, 300.0), st.floats(0.0, 1.0))
    def test_incomplete_beta_against_mpmath(self, a, b, x):
        mp.mp.dps = 40
        want = mp.betainc(a, b, 0, x, regularized=True)
        got = betainc_regularized(a, b, x)
        assert abs(got - float(want)) <= 1e-12 * max(1.0, abs(float(want)))


class TestOracleEquivalence:
    def test_thousand_random_samples(self):
        rng = np.random.default_rng(2024)
        worst_r = worst_p = 0.0
        for _ in range(1000):
            m = int(rng.integers(3, 201))
            x = rng.normal(size=m)
            y = rng.uniform(-1, 1) * x + rng.normal(size=m)
            r = pearson_r(x, y)
            worst_r = max(worst_r, abs(r - float(oracle_r(x, y))))
            worst_p = max(worst_p, abs(p_value_two_sided(r, m) - float(oracle_p(r, m))))
        assert worst_r < 1e-12
        assert worst_p < 1e-9


class TestLinearFit:
    def test_exact_line(self):
        x = np.arange(6.0)
        fit = linear_fit_with_ci(x, 2 * x + 1)
        assert fit.slope == pytest.approx(2.0, abs=1e-14)
        assert fit.intercept == pytest.approx(1.0, abs=1e-14)
        assert np.all(fit.band(np.linspace(-5, 10, 20)) < 1e-13)

    def test_two_points_rejected(self):
        with pytest.raises(ValueError):
            linear_fit_with_ci([1.0, 2.0], [1.0, 3.0])

    def test_degenerate_x(self):
        with pytest.raises(ValueError):
            linear_fit_with_ci([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])

    def test_normal_equations_oracle(self, rng):
        x = rng.normal(size=50)
        y = 0.7 * x - 0.2 + rng.normal(scale=0.5, size=50)
        design = np.column_stack([np.ones(50), x])
        intercept, slope = np.linalg.solve(design.T @ design, design.T @ y)
        fit = linear_fit_with_ci(x, y)
        assert abs(fit.slope - slope) < 1e-10
        assert abs(fit.intercept - intercept) < 1e-10

    def test_band_shape(self, rng):
        x = rng.uniform(0, 1, 30)
        y = x + rng.normal(scale=0.2, size=30)
        fit = linear_fit_with_ci(x, y)
        grid = np.linspace(-1, 2, 301)
        band = fit.band(grid)
        assert np.all(band >= 0)
        assert fit.band(x.mean()) <= band.min() + 1e-15
        # at the mean the half-width reduces to t * s / sqrt(m)
        resid = y - fit.predict(x)
        s = math.sqrt(resid @ resid / 28)
        assert fit.band(x.mean()) == pytest.approx(fit.t_crit * s / math.sqrt(30), rel=1e-12)
        assert fit.t_crit == pytest.approx(2.048407141795244, rel=1e-9)

    def test_correlate_bundle(self):
        res = correlate([1, 2, 3, 4], [2, 4, 5, 9])
        assert res.m == 4 and -1 <= res.r <= 1 and 0 <= res.p <= 1
