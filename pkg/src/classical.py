"""Classical comparators: paired t-tests, two-way factorial ANOVA and the
distribution functions used for p-values and Wald quantiles across the package.

The ANOVA deliberately treats every measurement as an independent replicate,
as the classical crossover analysis did.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import betainc, betaincinv, erfc, ndtri

from .dataset import LongDataset
from .errors import (EmptyCell, InvalidDf, LengthMismatch, LongmixError, UnbalancedDesign,
                     ZeroVariance)

logger = logging.getLogger(__name__)

Number = Union[float, np.ndarray]


def _as_output(value: np.ndarray, like) -> Number:
    return float(value) if np.ndim(like) == 0 else value


def _check_df(*dfs: float) -> None:
    for df in dfs:
        if df is None or not np.isfinite(df) or df <= 0:
            raise InvalidDf(f"Degrees of freedom must be positive and finite, got {df}")


def normal_cdf(x: Number) -> Number:
    x_arr = np.asarray(x, dtype=float)
    return _as_output(0.5 * erfc(-x_arr / math.sqrt(2.0)), x)


def normal_ppf(p: Number) -> Number:
    p_arr = np.asarray(p, dtype=float)
    if np.any((p_arr < 0) | (p_arr > 1)):
        raise ValueError(f"Probabilities must lie in [0, 1], got {p}")
    return _as_output(ndtri(p_arr), p)


def t_cdf(x: Number, df: float) -> Number:
    """Student t CDF through the regularized incomplete beta function"""
    _check_df(df)
    x_arr = np.asarray(x, dtype=float)
    tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + x_arr ** 2))
    return _as_output(np.where(x_arr > 0, 1.0 - tail, tail), x)


def t_ppf(p: float, df: float) -> float:
    _check_df(df)
    if not 0.0 < p < 1.0:
        raise ValueError(f"Probability must lie in (0, 1), got {p}")
    if p == 0.5:
        return 0.0
    tail = 2.0 * min(p, 1.0 - p)
    x = float(betaincinv(df / 2.0, 0.5, tail))
    t = math.sqrt(df * (1.0 - x) / x)
    return t if p > 0.5 else -t


def f_cdf(x: Number, df1: float, df2: float) -> Number:
    _check_df(df1, df2)
    x_arr = np.clip(np.asarray(x, dtype=float), 0.0, None)
    return _as_output(betainc(df1 / 2.0, df2 / 2.0, df1 * x_arr / (df1 * x_arr + df2)), x)


def f_sf(x: Number, df1: float, df2: float) -> Number:
    """Upper tail of F, computed directly to keep small p-values accurate"""
    _check_df(df1, df2)
    x_arr = np.clip(np.asarray(x, dtype=float), 0.0, None)
    return _as_output(betainc(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * x_arr)), x)


def dist_cdf(kind: str, x: Number, df1: Optional[float] = None, df2: Optional[float] = None) -> Number:
    """
    CDF dispatcher
    Args:
        kind: 'normal', 'student_t' (df1 = df) or 'F' (df1, df2)
        x: Evaluation point(s)
    Returns:
        Probability (float for scalar input)
    """
    key = kind.lower()
    if key == 'normal':
        return normal_cdf(x)
    if key in ('student_t', 't'):
        return t_cdf(x, df1)
    if key == 'f':
        return f_cdf(x, df1, df2)
    raise ValueError(f"Unknown distribution '{kind}'")


def two_sided_normal_p(z: float) -> float:
    return float(min(1.0, 2.0 * normal_cdf(-abs(z))))


@dataclass
class PairedTResult:
    n: int
    mean_diff: float
    sd_diff: float
    t_stat: float
    df: int
    p_two_sided: float
    ci_low: float
    ci_high: float
    level: float

    def to_dict(self) -> Dict:
        return asdict(self)


def paired_t_test(x: Sequence[float], y: Sequence[float], level: float = 0.95) -> PairedTResult:
    """
    Paired Student t-test on x - y
    Args:
        x, y: Paired measurements of equal length n >= 2
        level: Confidence level of the interval for the mean difference
    Returns:
        PairedTResult with df = n - 1
    """
    x_arr = np.asarray(x, dtype=float)
    y_arr = np.asarray(y, dtype=float)
    if x_arr.shape != y_arr.shape:
        raise LengthMismatch(f"Paired samples differ in length: {len(x_arr)} vs {len(y_arr)}")
    n = len(x_arr)
    if n < 2:
        raise LengthMismatch(f"A paired t-test needs at least 2 pairs, got {n}")

    d = x_arr - y_arr
    mean = float(np.mean(d))
    sd = float(np.std(d, ddof=1))
    df = n - 1
    if sd == 0.0:
        if np.all(d == 0.0):
            # Identical pairs: no evidence of a difference
            return PairedTResult(n=n, mean_diff=0.0, sd_diff=0.0, t_stat=0.0, df=df, p_two_sided=1.0,
                                 ci_low=0.0, ci_high=0.0, level=level)
        raise ZeroVariance("Paired differences are constant and nonzero; the t statistic is undefined")

    se = sd / math.sqrt(n)
    t_stat = mean / se
    p = float(min(1.0, 2.0 * t_cdf(-abs(t_stat), df)))
    half = t_ppf((1.0 + level) / 2.0, df) * se if level > 0 else 0.0
    return PairedTResult(n=n, mean_diff=mean, sd_diff=sd, t_stat=t_stat, df=df, p_two_sided=p,
                         ci_low=mean - half, ci_high=mean + half, level=level)


@dataclass
class PairedContrast:
    label: str
    first: Tuple[int, int]
    second: Tuple[int, int]
    result: Optional[PairedTResult] = None
    error: Optional[str] = None

    def to_dict(self) -> Dict:
        return {
            'label': self.label,
            'first': {'day': self.first[0], 'time_point': self.first[1]},
            'second': {'day': self.second[0], 'time_point': self.second[1]},
            'result': self.result.to_dict() if self.result else None,
            'error': self.error,
        }


def default_pairs(data: LongDataset) -> List[Tuple[Tuple[int, int], Tuple[int, int]]]:
    """Exposure day 2 against control day 1 at every time point both days share"""
    if not {1, 2} <= set(data.days):
        return []
    tps_day1 = {obs.time_point for obs in data.rows if obs.day == 1}
    tps_day2 = {obs.time_point for obs in data.rows if obs.day == 2}
    return [((2, tp), (1, tp)) for tp in sorted(tps_day1 & tps_day2)]


def kerr_paired_tests(data: LongDataset,
                      pairs: Optional[Sequence[Tuple[Tuple[int, int], Tuple[int, int]]]] = None,
                      level: float = 0.95) -> List[PairedContrast]:
    """Per-subject paired t-tests for user-chosen (day, time point) contrasts"""
    pairs = list(pairs) if pairs is not None else default_pairs(data)
    lookup = {(obs.subject_id, obs.day, obs.time_point): obs.response for obs in data.rows}
    contrasts = []
    for first, second in pairs:
        label = f"day{first[0]}@tp{first[1]} - day{second[0]}@tp{second[1]}"
        contrast = PairedContrast(label=label, first=tuple(first), second=tuple(second))
        x, y = [], []
        for subject in data.subjects:
            a = lookup.get((subject, first[0], first[1]))
            b = lookup.get((subject, second[0], second[1]))
            if a is not None and b is not None:
                x.append(a)
                y.append(b)
        try:
            contrast.result = paired_t_test(x, y, level)
        except LongmixError as e:
            logger.warning(f"Paired test {label} failed: {e.code}: {e}")
            contrast.error = e.code
        contrasts.append(contrast)
    return contrasts


@dataclass
class AnovaRow:
    effect: str
    ss: float
    df: int
    ms: Optional[float]
    f: Optional[float] = None
    p: Optional[float] = None


@dataclass
class AnovaTable:
    rows: Dict[str, AnovaRow]
    ss_total: float
    df_total: int
    zero_error_variance: bool = False
    notes: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            'rows': {name: asdict(row) for name, row in self.rows.items()},
            'ss_total': self.ss_total,
            'df_total': self.df_total,
            'zero_error_variance': self.zero_error_variance,
            'notes': list(self.notes),
        }


def factorial_anova(data: LongDataset) -> AnovaTable:
    """
    Two-way fixed-effects ANOVA of the response on day x time point (both categorical)
    Args:
        data: Balanced dataset, every (day, time_point) cell with the same count
    Returns:
        AnovaTable with rows day, hour, day:hour and error
    """
    frame = data.to_frame().rename(columns={data.response_name: 'y'})
    days = sorted(frame['day'].unique())
    hours = sorted(frame['time_point'].unique())

    counts = frame.groupby(['day', 'time_point']).size()
    for day in days:
        for tp in hours:
            if (day, tp) not in counts.index:
                raise EmptyCell(f"No observations in cell day {day}, time point {tp}")
    if counts.nunique() != 1:
        raise UnbalancedDesign(
            f"Cell counts range from {counts.min()} to {counts.max()}; "
            "sequential sums of squares are only reported for balanced designs")

    y = frame['y'].to_numpy(dtype=float)
    grand = float(y.mean())
    day_means = frame.groupby('day')['y'].transform('mean').to_numpy()
    hour_means = frame.groupby('time_point')['y'].transform('mean').to_numpy()
    cell_means = frame.groupby(['day', 'time_point'])['y'].transform('mean').to_numpy()

    ss_day = float(np.sum((day_means - grand) ** 2))
    ss_hour = float(np.sum((hour_means - grand) ** 2))
    ss_cells = float(np.sum((cell_means - grand) ** 2))
    ss_interaction = max(0.0, ss_cells - ss_day - ss_hour)
    ss_error = float(np.sum((y - cell_means) ** 2))
    ss_total = float(np.sum((y - grand) ** 2))

    a, b, n = len(days), len(hours), len(y)
    df_day, df_hour = a - 1, b - 1
    df_interaction = df_day * df_hour
    df_error = n - a * b

    ms_error = ss_error / df_error if df_error > 0 else None
    zero_error = ms_error is None or ms_error <= 1e-14 * max(1.0, ss_total)

    rows: Dict[str, AnovaRow] = {}
    for name, ss, df in (('day', ss_day, df_day), ('hour', ss_hour, df_hour),
                         ('day:hour', ss_interaction, df_interaction)):
        ms = ss / df if df > 0 else None
        row = AnovaRow(effect=name, ss=ss, df=df, ms=ms)
        if ms is not None and not zero_error:
            row.f = ms / ms_error
            row.p = float(f_sf(row.f, df, df_error))
        rows[name] = row
    rows['error'] = AnovaRow(effect='error', ss=ss_error, df=df_error, ms=ms_error)

    notes = []
    if zero_error:
        notes.append('ZeroErrorVariance: F statistics are undefined')
        logger.warning("ANOVA error variance is zero; F and p reported as null")

    return AnovaTable(rows=rows, ss_total=ss_total, df_total=n - 1,
                      zero_error_variance=zero_error, notes=notes)
