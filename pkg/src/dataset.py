"""Long-format repeated-measures data: ingestion, validation and design encoding.

One row per (subject, treatment day, time point). The canonical CSV schema is
``subject_id,day,time_point,hour_actual,smoker,fev1`` and is the wire contract
for every CLI subcommand.
"""
import io
import logging
import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
import pandas as pd

from .errors import (DuplicateTriple, EmptyDataset, InvalidModelSpec, MissingColumn, NonConstantSmoker,
                     SingleLevelFactor, UnparseableValue)

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ('subject_id', 'day', 'time_point', 'hour_actual', 'smoker', 'fev1')
VALID_DAYS = (1, 2, 3)
MAX_TIME_POINT = 6
SMOKER_VALUES = {'0': False, '1': True, 'false': False, 'true': True}

# Canonical fixed-effect term order; column blocks follow the same order
TERM_ORDER = ('intercept', 'smoker', 'day', 'hour', 'day:hour', 'hour2')


class CorrFamily(str, Enum):
    AR1 = 'ar1'
    CS = 'cs'
    INDEPENDENT = 'independent'

    @classmethod
    def parse(cls, value: Union[str, 'CorrFamily']) -> 'CorrFamily':
        if isinstance(value, cls):
            return value
        aliases = {
            'ar1': cls.AR1, 'ar(1)': cls.AR1,
            'cs': cls.CS, 'compound-symmetric': cls.CS, 'compoundsymmetric': cls.CS,
            'independent': cls.INDEPENDENT, 'ind': cls.INDEPENDENT,
        }
        key = str(value).strip().lower()
        if key not in aliases:
            raise InvalidModelSpec(f"Unknown correlation family '{value}' (use ar1, cs or independent)")
        return aliases[key]


class Grouping(str, Enum):
    SUBJECT = 'subject'
    SUBJECT_DAY = 'subject-day'

    @classmethod
    def parse(cls, value: Union[str, 'Grouping']) -> 'Grouping':
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace('_', '-')
        key = {'per-subject': 'subject', 'per-subject-day': 'subject-day'}.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise InvalidModelSpec(f"Unknown grouping '{value}' (use subject or subject-day)")


class Method(str, Enum):
    REML = 'reml'
    ML = 'ml'

    @classmethod
    def parse(cls, value: Union[str, 'Method']) -> 'Method':
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise InvalidModelSpec(f"Unknown estimation method '{value}' (use reml or ml)")


@dataclass(frozen=True)
class Observation:
    subject_id: str
    day: int
    time_point: int
    hour_actual: float
    smoker: bool
    response: float

    @property
    def series_key(self) -> Tuple[str, int]:
        return (self.subject_id, self.day)


def subject_sort_key(subject_id: str) -> Tuple:
    """Natural ordering so that s2 sorts before s10"""
    parts = re.split(r'(\d+)', subject_id)
    return tuple(int(part) if i % 2 else part for i, part in enumerate(parts))


def _row_key(obs: Observation) -> Tuple:
    return (subject_sort_key(obs.subject_id), obs.day, obs.time_point)


@dataclass(frozen=True)
class LongDataset:
    rows: Tuple[Observation, ...]
    response_name: str = 'fev1'

    @classmethod
    def build(cls, observations: Iterable[Observation], response_name: str = 'fev1',
              line_numbers: Optional[Sequence[int]] = None) -> 'LongDataset':
        """
        Validate observations and return them in normalized (subject, day, time_point) order
        Args:
            observations: Observations in any order
            response_name: Label of the response column
            line_numbers: Optional source line per observation, used in error messages
        Returns:
            Validated LongDataset
        """
        rows = list(observations)
        lines = list(line_numbers) if line_numbers is not None else [None] * len(rows)

        seen: Dict[Tuple[str, int, int], Optional[int]] = {}
        smoker_by_subject: Dict[str, Tuple[bool, Optional[int]]] = {}
        for obs, line in zip(rows, lines):
            _validate_observation(obs, line)
            triple = (obs.subject_id, obs.day, obs.time_point)
            if triple in seen:
                first = seen[triple]
                where = f" (first seen at row {first})" if first is not None else ''
                raise DuplicateTriple(
                    f"Duplicate measurement for subject {obs.subject_id}, day {obs.day}, "
                    f"time point {obs.time_point}{where}", row=line)
            seen[triple] = line

            if obs.subject_id in smoker_by_subject:
                flag, first_line = smoker_by_subject[obs.subject_id]
                if flag != obs.smoker:
                    raise NonConstantSmoker(
                        f"Smoker flag changes within subject {obs.subject_id}", row=line, column='smoker')
            else:
                smoker_by_subject[obs.subject_id] = (obs.smoker, line)

        rows.sort(key=_row_key)
        return cls(rows=tuple(rows), response_name=response_name)

    @property
    def n(self) -> int:
        return len(self.rows)

    @property
    def subjects(self) -> List[str]:
        return sorted({obs.subject_id for obs in self.rows}, key=subject_sort_key)

    @property
    def days(self) -> List[int]:
        return sorted({obs.day for obs in self.rows})

    @property
    def time_points(self) -> List[int]:
        return sorted({obs.time_point for obs in self.rows})

    def smoker_of(self, subject_id: str) -> bool:
        for obs in self.rows:
            if obs.subject_id == subject_id:
                return obs.smoker
        raise KeyError(subject_id)

    def subset(self, predicate: Callable[[Observation], bool]) -> 'LongDataset':
        return LongDataset(rows=tuple(obs for obs in self.rows if predicate(obs)),
                           response_name=self.response_name)

    def filter_time_points(self, keep: Iterable[int]) -> 'LongDataset':
        keep_set = {int(tp) for tp in keep}
        filtered = self.subset(lambda obs: obs.time_point in keep_set)
        if filtered.n == 0:
            raise EmptyDataset(f"Time-point filter {sorted(keep_set)} keeps no rows; observed time points are "
                               f"{list(self.time_points)}")
        logger.info(f"Time-point filter {sorted(keep_set)} kept {filtered.n} of {self.n} rows")
        return filtered

    def stratum(self, name: str, level) -> 'LongDataset':
        if name == 'smoker':
            return self.subset(lambda obs: obs.smoker == bool(level))
        if name == 'day':
            return self.subset(lambda obs: obs.day == int(level))
        raise InvalidModelSpec(f"Cannot stratify by '{name}' (use smoker or day)")

    def stratum_levels(self, name: str) -> List:
        if name == 'smoker':
            return sorted({obs.smoker for obs in self.rows})
        if name == 'day':
            return self.days
        raise InvalidModelSpec(f"Cannot stratify by '{name}' (use smoker or day)")

    def with_responses(self, responses: Sequence[float]) -> 'LongDataset':
        """Same layout with the response column replaced (rows in normalized order)"""
        if len(responses) != self.n:
            raise ValueError(f"Expected {self.n} responses, got {len(responses)}")
        return LongDataset(
            rows=tuple(replace(obs, response=float(value)) for obs, value in zip(self.rows, responses)),
            response_name=self.response_name,
        )

    def responses(self) -> np.ndarray:
        return np.array([obs.response for obs in self.rows], dtype=float)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'subject_id': [obs.subject_id for obs in self.rows],
            'day': [obs.day for obs in self.rows],
            'time_point': [obs.time_point for obs in self.rows],
            'hour_actual': [obs.hour_actual for obs in self.rows],
            'smoker': [int(obs.smoker) for obs in self.rows],
            self.response_name: [obs.response for obs in self.rows],
        }, columns=['subject_id', 'day', 'time_point', 'hour_actual', 'smoker', self.response_name])


def _validate_observation(obs: Observation, line: Optional[int]) -> None:
    if obs.day not in VALID_DAYS:
        raise UnparseableValue(f"Day must be one of {VALID_DAYS}, got {obs.day}", row=line, column='day')
    if not 0 <= obs.time_point <= MAX_TIME_POINT:
        raise UnparseableValue(f"Time point must be in 0..{MAX_TIME_POINT}, got {obs.time_point}",
                               row=line, column='time_point')
    if not math.isfinite(obs.response):
        raise UnparseableValue(f"Response must be finite, got {obs.response}", row=line, column='fev1')
    if not math.isfinite(obs.hour_actual):
        raise UnparseableValue(f"hour_actual must be finite, got {obs.hour_actual}", row=line,
                               column='hour_actual')


def _parse_int(value: str, line: int, column: str) -> int:
    try:
        number = float(value)
    except ValueError:
        raise UnparseableValue(f"Cannot parse '{value}' as an integer", row=line, column=column)
    if not number.is_integer():
        raise UnparseableValue(f"Expected an integer, got '{value}'", row=line, column=column)
    return int(number)


def _parse_float(value: str, line: int, column: str) -> float:
    try:
        number = float(value)
    except ValueError:
        raise UnparseableValue(f"Cannot parse '{value}' as a number", row=line, column=column)
    if not math.isfinite(number):
        raise UnparseableValue(f"Value must be finite, got '{value}'", row=line, column=column)
    return number


def parse_long_csv(text: Union[str, TextIO], response_name: str = 'fev1') -> LongDataset:
    """
    Parse canonical long-format CSV text into a validated dataset
    Args:
        text: CSV contents or an open text stream
        response_name: Label stored on the dataset
    Returns:
        LongDataset in normalized (subject, day, time_point) order
    """
    stream = io.StringIO(text) if isinstance(text, str) else text
    try:
        frame = pd.read_csv(stream, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise MissingColumn("CSV input is empty; expected header " + ','.join(REQUIRED_COLUMNS))

    frame.columns = [str(col).strip() for col in frame.columns]
    for column in REQUIRED_COLUMNS:
        if column not in frame.columns:
            raise MissingColumn(f"Required column '{column}' is missing from the header", column=column)
    for column in frame.columns:
        if column not in REQUIRED_COLUMNS:
            raise UnparseableValue(f"Unexpected column '{column}' in header", row=1, column=column)

    observations = []
    line_numbers = []
    for index, record in enumerate(frame.to_dict('records')):
        line = index + 2  # header is line 1
        subject_id = record['subject_id'].strip()
        if not subject_id:
            raise UnparseableValue("Empty subject_id", row=line, column='subject_id')
        smoker_text = record['smoker'].strip().lower()
        if smoker_text not in SMOKER_VALUES:
            raise UnparseableValue(f"Smoker must be 0, 1, true or false, got '{record['smoker']}'",
                                   row=line, column='smoker')
        observations.append(Observation(
            subject_id=subject_id,
            day=_parse_int(record['day'], line, 'day'),
            time_point=_parse_int(record['time_point'], line, 'time_point'),
            hour_actual=_parse_float(record['hour_actual'], line, 'hour_actual'),
            smoker=SMOKER_VALUES[smoker_text],
            response=_parse_float(record['fev1'], line, 'fev1'),
        ))
        line_numbers.append(line)

    data = LongDataset.build(observations, response_name=response_name, line_numbers=line_numbers)
    logger.info(f"Parsed {data.n} rows: {len(data.subjects)} subjects, days {data.days}, "
                f"time points {data.time_points}")
    return data


def read_long_csv(path: str) -> LongDataset:
    with open(path, 'r', encoding='utf-8') as f:
        return parse_long_csv(f)


def write_long_csv(data: LongDataset, path: Optional[str] = None) -> str:
    """Write the canonical CSV schema; returns the text when no path is given"""
    frame = data.to_frame().rename(columns={data.response_name: 'fev1'})
    text = frame.to_csv(index=False, lineterminator='\n')
    if path is not None:
        with open(path, 'w', encoding='utf-8', newline='') as f:
            f.write(text)
    return text


def parse_model_formula(text: str) -> Tuple[str, ...]:
    """
    Parse a fixed-effects formula such as ``day*hour+smoker``
    Args:
        text: Terms joined by '+'; 'a*b' expands to a + b + a:b
    Returns:
        Canonically ordered term tuple, intercept included
    """
    terms = {'intercept'}
    aliases = {'1': 'intercept', 'intercept': 'intercept', 'smoker': 'smoker', 'day': 'day',
               'hour': 'hour', 'hour2': 'hour2', 'hour^2': 'hour2'}
    for chunk in str(text).replace(' ', '').split('+'):
        if not chunk:
            continue
        if '*' in chunk or ':' in chunk:
            parts = re.split(r'[*:]', chunk)
            names = sorted(aliases.get(part.lower(), part) for part in parts)
            if names != ['day', 'hour']:
                raise InvalidModelSpec(f"Unsupported interaction '{chunk}' (only day*hour / day:hour)")
            if '*' in chunk:
                terms.update(['day', 'hour'])
            terms.add('day:hour')
            continue
        name = aliases.get(chunk.lower())
        if name is None:
            raise InvalidModelSpec(f"Unknown fixed-effect term '{chunk}'")
        terms.add(name)
    return tuple(term for term in TERM_ORDER if term in terms)


@dataclass(frozen=True)
class ModelSpec:
    fixed_terms: Tuple[str, ...] = ('intercept', 'smoker', 'day', 'hour', 'day:hour')
    grouping: Grouping = Grouping.SUBJECT
    corr_family: CorrFamily = CorrFamily.AR1
    method: Method = Method.REML
    poly_degree: int = 1

    def __post_init__(self):
        terms = set(self.fixed_terms)
        unknown = terms.difference(TERM_ORDER)
        if unknown:
            raise InvalidModelSpec(f"Unknown fixed-effect terms: {sorted(unknown)}")
        if self.poly_degree not in (1, 2):
            raise InvalidModelSpec(f"poly_degree must be 1 or 2, got {self.poly_degree}")
        terms.add('intercept')
        if self.poly_degree == 2:
            terms.add('hour2')
        if 'hour2' in terms:
            object.__setattr__(self, 'poly_degree', 2)
        if 'day:hour' in terms and not {'day', 'hour'} <= terms:
            raise InvalidModelSpec("day:hour requires both the day and hour terms")
        if 'hour2' in terms and 'hour' not in terms:
            raise InvalidModelSpec("A quadratic hour term requires the linear hour term")
        object.__setattr__(self, 'fixed_terms', tuple(t for t in TERM_ORDER if t in terms))
        object.__setattr__(self, 'grouping', Grouping.parse(self.grouping))
        object.__setattr__(self, 'corr_family', CorrFamily.parse(self.corr_family))
        object.__setattr__(self, 'method', Method.parse(self.method))

    def has(self, term: str) -> bool:
        return term in self.fixed_terms

    def without(self, *terms: str) -> 'ModelSpec':
        """Drop terms along with anything that depends on them"""
        drop = set(terms)
        if drop & {'day', 'hour'}:
            drop.add('day:hour')
        if 'hour' in drop:
            drop.add('hour2')
        kept = tuple(t for t in self.fixed_terms if t not in drop)
        poly = 2 if 'hour2' in kept else 1
        return replace(self, fixed_terms=kept, poly_degree=poly)

    def with_family(self, family: Union[str, CorrFamily]) -> 'ModelSpec':
        return replace(self, corr_family=CorrFamily.parse(family))

    @property
    def formula(self) -> str:
        return ' + '.join(self.fixed_terms)

    def to_dict(self) -> Dict:
        return {
            'fixed_terms': list(self.fixed_terms),
            'grouping': self.grouping.value,
            'corr_family': self.corr_family.value,
            'method': self.method.value,
            'poly_degree': self.poly_degree,
        }


@dataclass(frozen=True)
class GroupPattern:
    """Groups that share one within-group time layout, and so one covariance block"""
    signature: Tuple[Tuple[int, ...], ...]
    rows: np.ndarray
    group_index: np.ndarray

    @property
    def size(self) -> int:
        return int(self.rows.shape[1])

    @property
    def series_times(self) -> List[np.ndarray]:
        return [np.array(times, dtype=float) for times in self.signature]


@dataclass(frozen=True)
class DesignMatrices:
    X: np.ndarray
    y: np.ndarray
    column_names: Tuple[str, ...]
    series: List[np.ndarray]
    groups: List[np.ndarray]
    series_labels: List[Tuple[str, int]]
    group_labels: List[str]
    time_points: np.ndarray
    hours: np.ndarray
    days: np.ndarray
    patterns: List[GroupPattern] = field(default_factory=list)

    @property
    def n(self) -> int:
        return int(self.X.shape[0])

    @property
    def p(self) -> int:
        return int(self.X.shape[1])

    @property
    def max_series_length(self) -> int:
        return max((len(s) for s in self.series), default=0)


def _group_label(obs: Observation, grouping: Grouping) -> str:
    if grouping == Grouping.SUBJECT_DAY:
        return f"{obs.subject_id}/day{obs.day}"
    return obs.subject_id


def encode_design(data: LongDataset, spec: ModelSpec) -> DesignMatrices:
    """
    Build the fixed-effects matrix and the series/group partitions
    Args:
        data: Validated dataset (rows already in normalized order)
        spec: Model specification
    Returns:
        DesignMatrices with columns [intercept, smoker, day2, day3, hour, day2:hour, day3:hour, hour^2]
        restricted to the terms present in the model
    """
    if data.n == 0:
        raise SingleLevelFactor("Dataset has no rows")

    rows = data.rows
    days = np.array([obs.day for obs in rows], dtype=int)
    time_points = np.array([obs.time_point for obs in rows], dtype=int)
    hours = np.array([obs.hour_actual for obs in rows], dtype=float)
    smoker = np.array([1.0 if obs.smoker else 0.0 for obs in rows])
    hour = time_points.astype(float)

    day_levels = sorted(set(days.tolist()))
    if spec.has('day') and len(day_levels) < 2:
        raise SingleLevelFactor(f"Term 'day' has a single observed level ({day_levels[0]})", column='day')
    if spec.has('smoker') and len(set(smoker.tolist())) < 2:
        raise SingleLevelFactor("Term 'smoker' has a single observed level", column='smoker')
    dummy_levels = day_levels[1:]

    columns: List[np.ndarray] = []
    names: List[str] = []
    for term in spec.fixed_terms:
        if term == 'intercept':
            columns.append(np.ones(len(rows)))
            names.append('intercept')
        elif term == 'smoker':
            columns.append(smoker)
            names.append('smoker')
        elif term == 'day':
            for level in dummy_levels:
                columns.append((days == level).astype(float))
                names.append(f'day{level}')
        elif term == 'hour':
            columns.append(hour)
            names.append('hour')
        elif term == 'day:hour':
            for level in dummy_levels:
                columns.append((days == level).astype(float) * hour)
                names.append(f'day{level}:hour')
        elif term == 'hour2':
            columns.append(hour ** 2)
            names.append('hour^2')
    X = np.column_stack(columns)

    # Rows are sorted by (subject, day, time_point): series and groups are contiguous runs
    series: List[np.ndarray] = []
    series_labels: List[Tuple[str, int]] = []
    groups: List[np.ndarray] = []
    group_labels: List[str] = []
    start = 0
    group_start = 0
    for i in range(1, len(rows) + 1):
        if i == len(rows) or rows[i].series_key != rows[start].series_key:
            series.append(np.arange(start, i))
            series_labels.append(rows[start].series_key)
            start = i
        if i == len(rows) or _group_label(rows[i], spec.grouping) != _group_label(rows[group_start], spec.grouping):
            groups.append(np.arange(group_start, i))
            group_labels.append(_group_label(rows[group_start], spec.grouping))
            group_start = i

    patterns = _build_patterns(groups, days, time_points)

    return DesignMatrices(
        X=X,
        y=data.responses(),
        column_names=tuple(names),
        series=series,
        groups=groups,
        series_labels=series_labels,
        group_labels=group_labels,
        time_points=time_points,
        hours=hours,
        days=days,
        patterns=patterns,
    )


def _build_patterns(groups: List[np.ndarray], days: np.ndarray, time_points: np.ndarray) -> List[GroupPattern]:
    by_signature: Dict[Tuple[Tuple[int, ...], ...], List[int]] = {}
    for g, idx in enumerate(groups):
        signature = []
        current_day = None
        for row in idx:
            if days[row] != current_day:
                signature.append([])
                current_day = days[row]
            signature[-1].append(int(time_points[row]))
        key = tuple(tuple(s) for s in signature)
        by_signature.setdefault(key, []).append(g)

    patterns = []
    for signature, members in by_signature.items():
        patterns.append(GroupPattern(
            signature=signature,
            rows=np.vstack([groups[g] for g in members]),
            group_index=np.array(members, dtype=int),
        ))
    return patterns
