"""Model assessment for fitted mixed models: whitened residuals, pooled ACF,
semivariogram, random-intercept predictions and Q-Q plot data."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import solve_triangular

from .classical import normal_ppf
from .dataset import CorrFamily, DesignMatrices, LongDataset, encode_design
from .errors import DegenerateSample, NonPositiveDefiniteV
from .lmm import SIGMA_B2_BOUNDARY, FittedModel, VarianceParams, pattern_covariance

logger = logging.getLogger(__name__)


def _pattern_factors(vp: VarianceParams, family: CorrFamily, design: DesignMatrices):
    for pattern in design.patterns:
        V = pattern_covariance(vp, family, pattern)
        try:
            L = np.linalg.cholesky(V)
        except np.linalg.LinAlgError:
            raise NonPositiveDefiniteV("Fitted marginal covariance is not positive definite")
        yield pattern, L


def whiten_residuals(raw: np.ndarray, V_blocks: Sequence[np.ndarray], groups: Sequence[np.ndarray]) -> np.ndarray:
    """L^-1 r per group, where L L' = V for that group"""
    normalized = np.empty_like(np.asarray(raw, dtype=float))
    for V, idx in zip(V_blocks, groups):
        try:
            L = np.linalg.cholesky(np.asarray(V, dtype=float))
        except np.linalg.LinAlgError:
            raise NonPositiveDefiniteV("Covariance block is not positive definite")
        normalized[idx] = solve_triangular(L, raw[idx], lower=True)
    return normalized


def raw_residuals(fit: FittedModel, design: DesignMatrices) -> np.ndarray:
    return design.y - design.X @ fit.beta


def normalized_residuals(fit: FittedModel, data: LongDataset) -> np.ndarray:
    """
    Residuals whitened by the Cholesky factor of the fitted marginal covariance
    Args:
        fit: Fitted model
        data: Data the model was fitted to
    Returns:
        Vector in normalized row order
    """
    design = encode_design(data, fit.spec)
    return _normalized(fit, design, raw_residuals(fit, design))


def _normalized(fit: FittedModel, design: DesignMatrices, raw: np.ndarray) -> np.ndarray:
    normalized = np.empty_like(raw)
    for pattern, L in _pattern_factors(fit.vparams, fit.spec.corr_family, design):
        block = raw[pattern.rows]                        # (G, m)
        normalized[pattern.rows] = solve_triangular(L, block.T, lower=True).T
    return normalized


@dataclass
class AcfPoint:
    lag: int
    estimate: Optional[float]
    n_pairs: int
    bound: Optional[float]


def pooled_acf(residuals: np.ndarray, series: Sequence[np.ndarray], max_lag: int,
               time_points: Optional[np.ndarray] = None) -> List[AcfPoint]:
    """
    Autocorrelation pooled over series: sum of within-series lag-l products over the
    sum of all squared residuals
    Args:
        residuals: Residual vector
        series: Row indices of each ordered series
        max_lag: Largest lag reported (must be below the longest series length)
        time_points: Time-point index per row; lags follow index distance when given
    Returns:
        One AcfPoint per lag 0..max_lag with bound 2/sqrt(n_pairs)
    """
    r = np.asarray(residuals, dtype=float)
    longest = max((len(s) for s in series), default=0)
    if max_lag >= longest and time_points is None:
        raise DegenerateSample(f"max_lag {max_lag} must be below the longest series length {longest}")

    used = np.concatenate([np.asarray(s) for s in series]) if series else np.array([], dtype=int)
    denominator = float(np.sum(r[used] ** 2))

    sums = np.zeros(max_lag + 1)
    counts = np.zeros(max_lag + 1, dtype=int)
    for idx in series:
        idx = np.asarray(idx)
        positions = time_points[idx].astype(int) if time_points is not None else np.arange(len(idx))
        rs = r[idx]
        for a in range(len(idx)):
            for b in range(a, len(idx)):
                lag = int(abs(positions[b] - positions[a]))
                if lag <= max_lag:
                    sums[lag] += rs[a] * rs[b]
                    counts[lag] += 1

    points = []
    for lag in range(max_lag + 1):
        n_pairs = int(counts[lag])
        if lag == 0:
            estimate = 1.0
        elif n_pairs == 0 or denominator == 0.0:
            estimate = None
        else:
            estimate = float(sums[lag] / denominator)
        bound = 2.0 / np.sqrt(n_pairs) if n_pairs > 0 else None
        points.append(AcfPoint(lag=lag, estimate=estimate, n_pairs=n_pairs, bound=bound))
    return points


@dataclass
class VariogramPoint:
    lag: float
    gamma: float
    n_pairs: int


def semivariogram(residuals: np.ndarray, hours: np.ndarray, series: Sequence[np.ndarray]) -> List[VariogramPoint]:
    """Mean of 0.5 (r_i - r_j)^2 over within-series pairs, grouped by |hour_i - hour_j|"""
    r = np.asarray(residuals, dtype=float)
    h = np.asarray(hours, dtype=float)
    totals: Dict[float, float] = {}
    counts: Dict[float, int] = {}
    for idx in series:
        idx = np.asarray(idx)
        for a in range(len(idx)):
            for b in range(a + 1, len(idx)):
                lag = round(abs(float(h[idx[b]] - h[idx[a]])), 9)
                totals[lag] = totals.get(lag, 0.0) + 0.5 * (r[idx[a]] - r[idx[b]]) ** 2
                counts[lag] = counts.get(lag, 0) + 1
    if not counts:
        raise DegenerateSample("Semivariogram needs at least one within-series pair")
    return [VariogramPoint(lag=lag, gamma=totals[lag] / counts[lag], n_pairs=counts[lag])
            for lag in sorted(counts)]


@dataclass
class BlupResult:
    labels: List[str]
    values: np.ndarray
    zero_variance: bool = False

    def as_dict(self) -> Dict[str, float]:
        return {label: float(v) for label, v in zip(self.labels, self.values)}


def predict_intercepts(vp: VarianceParams, family: CorrFamily, design: DesignMatrices,
                       raw: np.ndarray) -> np.ndarray:
    """b_g = sigma_b2 * 1' V_g^-1 (y_g - X_g beta) for every group"""
    values = np.zeros(len(design.groups))
    for pattern, L in _pattern_factors(vp, family, design):
        ones_w = solve_triangular(L, np.ones(pattern.size), lower=True)
        resid_w = solve_triangular(L, raw[pattern.rows].T, lower=True)   # (m, G)
        values[pattern.group_index] = vp.sigma_b2 * (ones_w @ resid_w)
    return values


def blups(fit: FittedModel, data: LongDataset) -> BlupResult:
    design = encode_design(data, fit.spec)
    if fit.vparams.sigma_b2 < SIGMA_B2_BOUNDARY:
        logger.warning("Random-intercept variance is at zero; predicted intercepts are all zero")
        return BlupResult(labels=list(design.group_labels), values=np.zeros(len(design.groups)),
                          zero_variance=True)
    values = predict_intercepts(fit.vparams, fit.spec.corr_family, design, raw_residuals(fit, design))
    return BlupResult(labels=list(design.group_labels), values=values)


def qq_data(values: Sequence[float]) -> List[Tuple[float, float]]:
    """
    Normal Q-Q pairs: standardized order statistics against Phi^-1((i - 0.5) / n)
    Args:
        values: At least three values with nonzero spread
    Returns:
        (theoretical, sample) pairs sorted by theoretical quantile
    """
    x = np.asarray(values, dtype=float)
    n = len(x)
    if n < 3:
        raise DegenerateSample(f"Q-Q data needs at least 3 values, got {n}")
    sd = float(np.std(x, ddof=1))
    if sd == 0.0:
        raise DegenerateSample("Sample standard deviation is zero")
    sample = np.sort((x - x.mean()) / sd)
    theoretical = normal_ppf((np.arange(1, n + 1) - 0.5) / n)
    return [(float(t), float(s)) for t, s in zip(theoretical, sample)]


@dataclass
class DiagnosticsReport:
    normalized_residuals: np.ndarray
    raw_residuals: np.ndarray
    acf: List[AcfPoint]
    acf_raw: List[AcfPoint]
    variogram: List[VariogramPoint]
    variogram_raw: List[VariogramPoint]
    qq_resid: List[Tuple[float, float]]
    qq_blup: List[Tuple[float, float]]
    qq_by_day: Dict[int, List[Tuple[float, float]]]
    blups: BlupResult
    fitted_observed: pd.DataFrame
    notes: List[str] = field(default_factory=list)

    def frames(self) -> Dict[str, pd.DataFrame]:
        def acf_frame(points):
            return pd.DataFrame([p.__dict__ for p in points], columns=['lag', 'estimate', 'n_pairs', 'bound'])

        def vario_frame(points):
            return pd.DataFrame([p.__dict__ for p in points], columns=['lag', 'gamma', 'n_pairs'])

        qq_day_rows = [{'day': day, 'theoretical': t, 'sample': s}
                       for day, pairs in sorted(self.qq_by_day.items()) for t, s in pairs]
        return {
            'acf.csv': acf_frame(self.acf),
            'acf_raw.csv': acf_frame(self.acf_raw),
            'variogram.csv': vario_frame(self.variogram),
            'variogram_raw.csv': vario_frame(self.variogram_raw),
            'qq_resid.csv': pd.DataFrame(self.qq_resid, columns=['theoretical', 'sample']),
            'qq_blup.csv': pd.DataFrame(self.qq_blup, columns=['theoretical', 'sample']),
            'qq_by_day.csv': pd.DataFrame(qq_day_rows, columns=['day', 'theoretical', 'sample']),
            'blups.csv': pd.DataFrame({'group': self.blups.labels, 'blup': self.blups.values}),
            'fitted_observed.csv': self.fitted_observed,
        }

    def to_dict(self) -> Dict:
        return {
            'acf': [p.__dict__ for p in self.acf],
            'acf_raw': [p.__dict__ for p in self.acf_raw],
            'variogram': [p.__dict__ for p in self.variogram],
            'variogram_raw': [p.__dict__ for p in self.variogram_raw],
            'normalized_residual_variance': float(np.var(self.normalized_residuals, ddof=1)),
            'blups': self.blups.as_dict(),
            'zero_random_variance': self.blups.zero_variance,
            'notes': list(self.notes),
        }


def build_report(fit: FittedModel, data: LongDataset, max_lag: int = 6) -> DiagnosticsReport:
    """Assemble every diagnostic for one fitted model"""
    design = encode_design(data, fit.spec)
    raw = raw_residuals(fit, design)
    normalized = _normalized(fit, design, raw)
    notes = []

    longest = design.max_series_length
    if max_lag >= longest:
        notes.append(f"max_lag reduced from {max_lag} to {max(longest - 1, 0)}")
        max_lag = max(longest - 1, 0)

    intercepts = blups(fit, data)
    per_row_blup = np.zeros(design.n)
    for g, idx in enumerate(design.groups):
        per_row_blup[idx] = intercepts.values[g]
    marginal_fit = design.X @ fit.beta
    conditional_fit = marginal_fit + per_row_blup
    marginal_sd = np.sqrt(fit.vparams.sigma_b2 + fit.vparams.sigma_e2)

    fitted_observed = pd.DataFrame({
        'subject_id': [obs.subject_id for obs in data.rows],
        'day': design.days,
        'time_point': design.time_points,
        'observed': design.y,
        'fitted_marginal': marginal_fit,
        'fitted_conditional': conditional_fit,
        'standardized_residual': raw / marginal_sd,
    })

    qq_blup: List[Tuple[float, float]] = []
    if intercepts.zero_variance:
        notes.append('ZeroRandomVariance: random-intercept Q-Q data omitted')
    else:
        try:
            qq_blup = qq_data(intercepts.values)
        except DegenerateSample as e:
            notes.append(f"{e.code}: {e}")

    qq_by_day = {}
    for day in sorted(set(design.days.tolist())):
        mask = design.days == day
        try:
            qq_by_day[int(day)] = qq_data(normalized[mask])
        except DegenerateSample as e:
            notes.append(f"day {day}: {e.code}: {e}")

    series_with_pairs = [s for s in design.series if len(s) > 1]
    variogram = semivariogram(normalized, design.hours, series_with_pairs) if series_with_pairs else []
    variogram_raw = semivariogram(raw, design.hours, series_with_pairs) if series_with_pairs else []

    report = DiagnosticsReport(
        normalized_residuals=normalized,
        raw_residuals=raw,
        acf=pooled_acf(normalized, design.series, max_lag, design.time_points),
        acf_raw=pooled_acf(raw, design.series, max_lag, design.time_points),
        variogram=variogram,
        variogram_raw=variogram_raw,
        qq_resid=qq_data(normalized),
        qq_blup=qq_blup,
        qq_by_day=qq_by_day,
        blups=intercepts,
        fitted_observed=fitted_observed,
        notes=notes,
    )
    logger.info(f"Diagnostics: {design.n} residuals, ACF to lag {max_lag}, "
                f"{len(report.variogram)} variogram lags")
    return report
