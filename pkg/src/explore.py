"""Exploratory summaries: mean profiles per day, the empirical covariance and
correlation of OLS residuals across time points, and scatter-plot pairs."""
import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .dataset import LongDataset, ModelSpec, encode_design
from .errors import EmptyDataset, InsufficientReplicates

logger = logging.getLogger(__name__)


@dataclass
class ProfileEntry:
    mean: float
    sd: Optional[float]
    n: int


@dataclass
class MeanProfileTable:
    entries: Dict[Tuple[int, int], ProfileEntry]

    def to_frame(self) -> pd.DataFrame:
        records = [{'day': day, 'time_point': tp, 'mean': e.mean, 'sd': e.sd, 'n': e.n}
                   for (day, tp), e in sorted(self.entries.items())]
        return pd.DataFrame(records, columns=['day', 'time_point', 'mean', 'sd', 'n'])

    def to_list(self) -> List[Dict]:
        return [{'day': day, 'time_point': tp, 'mean': e.mean, 'sd': e.sd, 'n': e.n}
                for (day, tp), e in sorted(self.entries.items())]


def mean_profiles(data: LongDataset) -> MeanProfileTable:
    """Sample mean, sd (None when n = 1) and n of the response per (day, time point)"""
    if data.n == 0:
        raise EmptyDataset("mean_profiles needs a nonempty dataset")
    frame = data.to_frame()
    stats = frame.groupby(['day', 'time_point'])[data.response_name].agg(['mean', 'std', 'count'])
    entries = {}
    for (day, tp), row in stats.iterrows():
        n = int(row['count'])
        sd = float(row['std']) if n > 1 else None
        entries[(int(day), int(tp))] = ProfileEntry(mean=float(row['mean']), sd=sd, n=n)
    return MeanProfileTable(entries=entries)


@dataclass
class CovCorrMatrix:
    time_points: List[int]
    cov: np.ndarray
    corr: np.ndarray
    n_series: int

    def presentation(self) -> np.ndarray:
        """Covariance above the diagonal, variances on it, correlations below"""
        upper = np.triu(self.cov, k=1)
        lower = np.tril(self.corr, k=-1)
        return upper + lower + np.diag(np.diag(self.cov))

    def presentation_frame(self) -> pd.DataFrame:
        labels = [f"tp{tp}" for tp in self.time_points]
        return pd.DataFrame(self.presentation(), index=labels, columns=labels)

    def to_dict(self) -> Dict:
        return {
            'time_points': list(self.time_points),
            'n_series': self.n_series,
            'cov': self.cov.tolist(),
            'corr': self.corr.tolist(),
            'presentation': self.presentation().tolist(),
        }


def residual_cov_corr(residuals: Sequence[float], series_keys: Sequence, time_points: Sequence[int]) -> CovCorrMatrix:
    """
    Sample covariance (divisor n - 1) of residual vectors across time points
    Args:
        residuals: One residual per row
        series_keys: Replicate label per row, e.g. (subject_id, day)
        time_points: Time-point index per row
    Returns:
        CovCorrMatrix over the series observed at every time point
    """
    frame = pd.DataFrame({
        'series': [str(key) for key in series_keys],
        'time_point': np.asarray(time_points, dtype=int),
        'residual': np.asarray(residuals, dtype=float),
    })
    wide = frame.pivot(index='series', columns='time_point', values='residual').sort_index(axis=1)
    # Complete series only: every entry shares one replicate set
    complete = wide.dropna()
    if len(complete) < len(wide):
        logger.info(f"Covariance uses {len(complete)} of {len(wide)} series (complete over all time points)")
    if len(complete) < 2:
        raise InsufficientReplicates(
            f"Need at least 2 series observed at every time point, found {len(complete)}")
    wide = complete
    cov = wide.cov().to_numpy()

    variances = np.diag(cov)
    if np.any(variances <= 0.0):
        zero = [int(tp) for tp, v in zip(wide.columns, variances) if v <= 0.0]
        raise InsufficientReplicates(f"Residual variance is zero at time points {zero}")
    corr = cov / np.sqrt(np.outer(variances, variances))
    corr = (corr + corr.T) / 2.0
    np.fill_diagonal(corr, 1.0)
    return CovCorrMatrix(time_points=[int(tp) for tp in wide.columns], cov=cov, corr=corr,
                         n_series=len(wide))


def empirical_cov_corr(data: LongDataset, spec: ModelSpec) -> CovCorrMatrix:
    """Covariance and correlation across time points of residuals from an OLS fit of the mean model"""
    design = encode_design(data, spec)
    beta, *_ = np.linalg.lstsq(design.X, design.y, rcond=None)
    residuals = design.y - design.X @ beta
    keys = [obs.series_key for obs in data.rows]
    matrix = residual_cov_corr(residuals, keys, design.time_points)
    logger.info(f"Empirical covariance over {len(matrix.time_points)} time points from {matrix.n_series} series")
    return matrix


@dataclass
class ScatterPanel:
    time_point_a: int
    time_point_b: int
    points: List[Tuple[str, int, float, float]]


def pairwise_scatter_data(data: LongDataset) -> List[ScatterPanel]:
    """Within-series response pairs for every unordered pair of time points"""
    if data.n == 0:
        raise EmptyDataset("pairwise_scatter_data needs a nonempty dataset")
    by_series: Dict[Tuple[str, int], Dict[int, float]] = {}
    for obs in data.rows:
        by_series.setdefault(obs.series_key, {})[obs.time_point] = obs.response

    panels = []
    for a, b in combinations(data.time_points, 2):
        points = [(subject, day, values[a], values[b])
                  for (subject, day), values in by_series.items()
                  if a in values and b in values]
        panels.append(ScatterPanel(time_point_a=a, time_point_b=b, points=points))
    return panels


def scatter_frame(panels: Sequence[ScatterPanel]) -> pd.DataFrame:
    records = [{'time_point_a': p.time_point_a, 'time_point_b': p.time_point_b,
                'subject_id': subject, 'day': day, 'response_a': ya, 'response_b': yb}
               for p in panels for subject, day, ya, yb in p.points]
    return pd.DataFrame(records, columns=['time_point_a', 'time_point_b', 'subject_id', 'day',
                                          'response_a', 'response_b'])
