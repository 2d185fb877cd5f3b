"""Tests for whitened residuals, ACF, semivariogram, BLUPs and Q-Q data."""
import sys
from pathlib import Path

import numpy as np
import pytest

# Add the project root to Python path
project_root = str(Path(__file__).parents[2])
sys.path.insert(0, project_root)
sys.path.insert(0, str(Path(__file__).parent))

from sample_data import simulated
from src.classical import normal_ppf
from src.dataset import CorrFamily, LongDataset, ModelSpec, Observation, encode_design
from src.diagnostics import (blups, build_report, normalized_residuals, pooled_acf, predict_intercepts, qq_data,
                             semivariogram, whiten_residuals)
from src.errors import DegenerateSample
from src.lmm import VarianceParams, fit


@pytest.fixture(scope='module')
def fitted_sample():
    data = simulated(n_subjects=60)
    return data, fit(data, ModelSpec())


def test_scalar_whitening():
    normalized = whiten_residuals(np.array([2.0]), [4.0 * np.eye(1)], [np.array([0])])
    assert normalized[0] == pytest.approx(1.0)


def test_zero_residuals_whiten_to_zero():
    V = np.array([[2.0, 1.0], [1.0, 2.0]])
    np.testing.assert_array_equal(whiten_residuals(np.zeros(4), [V, V], [np.arange(2), np.arange(2, 4)]),
                                  np.zeros(4))


def test_normalized_residuals_have_unit_variance(fitted_sample):
    data, fitted = fitted_sample
    assert data.n >= 500
    variance = float(np.var(normalized_residuals(fitted, data), ddof=1))
    assert 0.9 <= variance <= 1.1


def test_acf_lag_zero_and_alternating_series():
    points = pooled_acf(np.array([1.0, -1.0, 1.0, -1.0]), [np.arange(4)], 1)
    assert points[0].estimate == 1.0
    assert points[1].estimate == pytest.approx(-0.75)
    assert points[1].n_pairs == 3
    assert points[1].bound == pytest.approx(2.0 / np.sqrt(3.0))


def test_acf_pools_series_and_respects_gaps():
    residuals = np.array([1.0, 2.0, 1.0, -1.0, 1.0])
    series = [np.array([0, 1, 2]), np.array([3, 4])]
    time_points = np.array([0, 1, 2, 0, 2])
    points = pooled_acf(residuals, series, 2, time_points)
    assert points[1].estimate == pytest.approx((2.0 + 2.0) / 8.0)
    assert points[2].estimate == pytest.approx((1.0 - 1.0) / 8.0)
    assert points[2].n_pairs == 2


def test_acf_rejects_lag_beyond_series():
    with pytest.raises(DegenerateSample):
        pooled_acf(np.ones(3), [np.arange(3)], 3)


def test_semivariogram_examples():
    points = semivariogram(np.array([0.0, 2.0]), np.array([0.0, 2.0]), [np.arange(2)])
    assert [(p.lag, p.gamma) for p in points] == [(2.0, 2.0)]
    flat = semivariogram(np.full(4, 3.0), np.array([0.0, 1.0, 2.0, 6.0]), [np.arange(4)])
    assert all(p.gamma == 0.0 for p in flat)
    assert [p.lag for p in flat] == [1.0, 2.0, 4.0, 5.0, 6.0]


def intercept_only_design(n_groups=5, m=3):
    observations = [Observation(subject_id=f"s{g + 1}", day=1, time_point=t, hour_actual=float(t), smoker=False,
                                response=0.0) for g in range(n_groups) for t in range(m)]
    data = LongDataset.build(observations)
    return encode_design(data, ModelSpec(fixed_terms=('intercept',), corr_family=CorrFamily.INDEPENDENT))


def test_blups_zero_for_zero_residuals():
    design = intercept_only_design()
    values = predict_intercepts(VarianceParams(0.5, 0.1), CorrFamily.INDEPENDENT, design, np.zeros(design.n))
    np.testing.assert_array_equal(values, np.zeros(5))


def test_blups_approach_group_mean_residual():
    design = intercept_only_design()
    raw = np.random.default_rng(3).normal(size=design.n)
    values = predict_intercepts(VarianceParams(1e6, 1.0), CorrFamily.INDEPENDENT, design, raw)
    means = np.array([raw[idx].mean() for idx in design.groups])
    np.testing.assert_allclose(values, means, rtol=1e-5, atol=1e-6)


def test_blups_sum_to_zero_with_intercept(fitted_sample):
    data, fitted = fitted_sample
    result = blups(fitted, data)
    assert not result.zero_variance
    assert len(result.values) == 60
    assert float(np.sum(result.values)) == pytest.approx(0.0, abs=1e-8)


def test_qq_three_points():
    pairs = qq_data([-1.0, 0.0, 1.0])
    theoretical = [t for t, _ in pairs]
    np.testing.assert_allclose(theoretical, [normal_ppf(1 / 6), 0.0, normal_ppf(5 / 6)])
    np.testing.assert_allclose([s for _, s in pairs], [-1.0, 0.0, 1.0])


def test_qq_of_normal_quantiles_is_a_line_through_the_origin():
    n = 40
    quantiles = normal_ppf((np.arange(1, n + 1) - 0.5) / n)
    pairs = np.array(qq_data(quantiles))
    rescaled = pairs[:, 1] * np.std(quantiles, ddof=1)
    np.testing.assert_allclose(rescaled, pairs[:, 0], atol=1e-6)


def test_qq_is_monotone_and_rejects_constants():
    pairs = np.array(qq_data(np.random.default_rng(5).normal(size=30)))
    assert np.all(np.diff(pairs[:, 0]) > 0)
    assert np.all(np.diff(pairs[:, 1]) >= 0)
    with pytest.raises(DegenerateSample):
        qq_data([2.0, 2.0, 2.0])
    with pytest.raises(DegenerateSample):
        qq_data([1.0, 2.0])


def test_build_report(fitted_sample):
    data, fitted = fitted_sample
    report = build_report(fitted, data, max_lag=6)
    assert len(report.acf) == 4
    assert any('max_lag reduced' in note for note in report.notes)
    frames = report.frames()
    assert set(frames) == {'acf.csv', 'acf_raw.csv', 'variogram.csv', 'variogram_raw.csv', 'qq_resid.csv',
                           'qq_blup.csv', 'qq_by_day.csv', 'blups.csv', 'fitted_observed.csv'}
    table = frames['fitted_observed.csv']
    assert len(table) == data.n
    assert {'day', 'fitted_marginal', 'fitted_conditional', 'standardized_residual'} <= set(table.columns)
    marginal_sd = np.sqrt(fitted.vparams.sigma_b2 + fitted.vparams.sigma_e2)
    np.testing.assert_allclose(table['standardized_residual'] * marginal_sd,
                               table['observed'] - table['fitted_marginal'], atol=1e-10)
    assert sorted(report.qq_by_day) == [1, 2, 3]
    assert len(report.qq_blup) == 60


def test_iid_semivariogram_sits_at_the_sill():
    rng = np.random.default_rng(11)
    n_series, length = 2000, 7
    residuals = rng.normal(scale=0.5, size=n_series * length)
    times = np.tile(np.arange(length, dtype=float), n_series)
    series = [np.arange(i * length, (i + 1) * length) for i in range(n_series)]
    points = semivariogram(residuals, times, series)
    assert [p.lag for p in points] == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
    for point in points:
        assert point.gamma == pytest.approx(np.var(residuals, ddof=1), abs=0.03)


def test_whitened_semivariogram_is_flat():
    data = simulated(n_subjects=100, time_points=tuple(range(7)))
    fitted = fit(data, ModelSpec())
    design = encode_design(data, fitted.spec)
    residuals = normalized_residuals(fitted, data)
    assert len(residuals) >= 500
    points = semivariogram(residuals, design.time_points.astype(float), design.series)
    slope = np.polyfit([p.lag for p in points], [p.gamma for p in points], 1)[0]
    assert abs(slope) <= 0.05


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v']))
