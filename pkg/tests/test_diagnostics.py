"""Tests for autocorrelation-based thinning and the predictive-density bound."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evstop import (
    ConfigError,
    DataError,
    LogLikTable,
    apply_thinning,
    integrated_autocorrelation_time,
    jensen_gap,
    loglik_sum_series,
)


def ar1_series(rho, n, seed):
    rng = np.random.default_rng(seed)
    x = np.empty(n)
    x[0] = rng.standard_normal() / math.sqrt(1.0 - rho * rho)
    noise = rng.standard_normal(n)
    for i in range(1, n):
        x[i] = rho * x[i - 1] + noise[i]
    return x


def make_table(rows, warmstart=None, source_indices=()):
    rows = np.asarray(rows, dtype=np.float64)
    return LogLikTable(
        chain_id="c0",
        warmstart_row=warmstart,
        sample_rows=rows,
        m=rows.shape[1],
        source_indices=source_indices,
    )


class TestIntegratedAutocorrelationTime:
    def test_white_noise_is_near_one(self):
        series = np.random.default_rng(123).standard_normal(10000)
        diag = integrated_autocorrelation_time(series)
        assert 0.9 <= diag.iac_time <= 1.1

    @pytest.mark.parametrize(
        "n,tolerance", [(1000, 0.50), (10000, 0.25), (100000, 0.15)]
    )
    def test_ar1_converges_to_closed_form(self, n, tolerance):
        # truth for AR(1) with coefficient rho: (1 + rho) / (1 - rho) = 3
        series = ar1_series(0.5, n, seed=42)
        diag = integrated_autocorrelation_time(series)
        assert abs(diag.iac_time - 3.0) / 3.0 < tolerance

    def test_recommended_interval_is_ceiling(self):
        series = ar1_series(0.5, 100000, seed=42)
        diag = integrated_autocorrelation_time(series)
        assert diag.recommended_interval == math.ceil(diag.iac_time)
        assert diag.iac_time >= 1.0
        assert diag.window_used >= 1

    def test_constant_series_is_degenerate(self):
        with pytest.raises(DataError, match="constant"):
            integrated_autocorrelation_time(np.ones(100))

    def test_short_series_rejected(self):
        with pytest.raises(DataError, match="at least 8"):
            integrated_autocorrelation_time([1.0, 2.0, 3.0])

    def test_shuffling_destroys_autocorrelation(self):
        series = ar1_series(0.9, 20000, seed=7)
        assert integrated_autocorrelation_time(series).iac_time > 5.0
        shuffled = series.copy()
        np.random.default_rng(9).shuffle(shuffled)
        assert integrated_autocorrelation_time(shuffled).iac_time < 1.5

    def test_estimate_clamped_below_at_one(self):
        # strongly anti-correlated series would estimate below 1 unclamped
        n = 10000
        series = np.tile([1.0, -1.0], n // 2)
        series += np.random.default_rng(3).standard_normal(n) * 0.01
        diag = integrated_autocorrelation_time(series)
        assert diag.iac_time == 1.0


class TestApplyThinning:
    def test_interval_one_is_identity(self):
        rng = np.random.default_rng(0)
        table = make_table(rng.normal(size=(20, 3)), warmstart=rng.normal(size=3))
        assert apply_thinning(table, 1) == table

    def test_hundred_rows_every_tenth(self):
        table = make_table(np.arange(200, dtype=float).reshape(100, 2))
        thinned = apply_thinning(table, 10, first_tested_position=1)
        assert thinned.n_samples == 10
        assert thinned.source_indices == (1, 11, 21, 31, 41, 51, 61, 71, 81, 91)
        assert np.array_equal(thinned.sample_rows[1], table.sample_rows[10])

    def test_saturating_interval_keeps_one_row(self):
        table = make_table(np.zeros((5, 2)))
        thinned = apply_thinning(table, 10)
        assert thinned.n_samples == 1
        assert thinned.source_indices == (1,)

    def test_idempotence(self):
        table = make_table(np.random.default_rng(1).normal(size=(37, 2)))
        once = apply_thinning(table, 4)
        assert apply_thinning(once, 1) == once

    def test_reference_row_kept_when_testing_starts_later(self):
        table = make_table(np.arange(20, dtype=float).reshape(10, 2))
        thinned = apply_thinning(table, 3, first_tested_position=2)
        # row 1 is the baseline and survives; tested rows are 2, 5, 8
        assert thinned.source_indices == (1, 2, 5, 8)

    def test_interval_validation(self):
        table = make_table(np.zeros((4, 1)))
        with pytest.raises(ConfigError):
            apply_thinning(table, 0)

    def test_source_maps_compose(self):
        table = make_table(np.arange(100, dtype=float).reshape(100, 1))
        twice = apply_thinning(apply_thinning(table, 2), 3)
        # every third of every second original row: 1, 7, 13, ...
        assert twice.source_indices[:4] == (1, 7, 13, 19)

    def test_warmstart_carried_through(self):
        warmstart = np.array([-1.0, -2.0])
        table = make_table(np.zeros((6, 2)), warmstart=warmstart)
        thinned = apply_thinning(table, 2)
        assert np.array_equal(thinned.warmstart_row, warmstart)


class TestLoglikSumSeries:
    def test_row_sums(self):
        table = make_table([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(loglik_sum_series(table), [3.0, 7.0])


class TestJensenGap:
    def test_single_member_gap_is_exactly_zero(self):
        report = jensen_gap([[-1.3, -0.2, -4.0]])
        assert report.gap == 0.0

    def test_two_members_one_point(self):
        # densities 0.5 and 0.25: ensemble density 0.375
        report = jensen_gap([[math.log(0.5)], [math.log(0.25)]])
        assert report.ensemble_lppd == pytest.approx(-0.98083, abs=1e-5)
        assert report.mean_member_loglik == pytest.approx(-1.03972, abs=1e-5)
        assert report.gap == pytest.approx(0.05889, abs=1e-5)
        assert report.gap > 0

    def test_identical_members_give_zero_gap(self):
        row = [-0.3, -1.7, -2.2]
        report = jensen_gap([row, row, row])
        assert abs(report.gap) < 1e-12

    def test_inconsistent_rows(self):
        with pytest.raises(DataError):
            jensen_gap([[-1.0, -2.0], [-1.0]])

    def test_empty_member_set(self):
        with pytest.raises(DataError):
            jensen_gap([])

    @settings(max_examples=300, deadline=None)
    @given(
        st.integers(min_value=1, max_value=8),
        st.integers(min_value=1, max_value=32),
        st.integers(min_value=0, max_value=2**32 - 1),
    )
    def test_gap_never_negative(self, k, m, seed):
        rows = np.random.default_rng(seed).uniform(-40.0, 3.0, size=(k, m))
        assert jensen_gap(rows).gap >= -1e-9
