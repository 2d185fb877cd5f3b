"""Shared sample datasets for the test scripts."""
import sys
from pathlib import Path
from typing import Dict, Iterable, List

# Add the project root to Python path
project_root = str(Path(__file__).parents[2])
if project_root not in sys.path:
    sys.path.insert(0, project_root)

from src.dataset import CorrFamily, LongDataset, Observation, write_long_csv
from src.simul import DEFAULT_HOURS, SimConfig, simulate

HEADER = 'subject_id,day,time_point,hour_actual,smoker,fev1'

# 1 subject x 1 day x 2 time points
MINIMAL_CSV = f"""{HEADER}
s1,1,0,0,0,4.10
s1,1,1,1,0,4.05
"""

DUPLICATE_CSV = f"""{HEADER}
s1,1,0,0,0,4.10
s1,1,0,0,0,4.12
"""


def csv_from_rows(rows: Iterable[Dict]) -> str:
    lines = [HEADER]
    for row in rows:
        lines.append(','.join(str(row[col]) for col in HEADER.split(',')))
    return '\n'.join(lines) + '\n'


def kerr_layout(n_subjects: int = 28, days=(1, 2, 3), time_points=range(7), base: float = 4.2) -> LongDataset:
    """Deterministic full crossover layout; half the subjects smoke"""
    observations = []
    for i in range(n_subjects):
        for day in days:
            for tp in time_points:
                observations.append(Observation(
                    subject_id=f"s{i + 1}", day=day, time_point=tp, hour_actual=DEFAULT_HOURS[tp],
                    smoker=i < n_subjects // 2,
                    response=base + 0.01 * i - 0.02 * day + 0.005 * tp,
                ))
    return LongDataset.build(observations)


def sim_config(**overrides) -> SimConfig:
    """Small, quick design: 24 subjects x 3 days x 4 time points"""
    values = dict(n_subjects=24, time_points=(0, 1, 2, 3), sigma_b2=0.04, sigma_e2=0.01, rho=0.5,
                  seed=1234, n_replicates=2)
    values.update(overrides)
    return SimConfig(**values)


def simulated(replicate: int = 0, **overrides) -> LongDataset:
    return simulate(sim_config(**overrides), replicate)


def random_intercept_config(seed: int, n_groups: int = 12, m: int = 5) -> SimConfig:
    """One day, intercept-only mean, independent residuals: the balanced one-way layout"""
    return SimConfig(n_subjects=n_groups, days=(1,), time_points=tuple(range(m)), beta={'intercept': 4.0},
                     sigma_b2=0.5, sigma_e2=0.2, rho=None, family=CorrFamily.INDEPENDENT,
                     fixed_terms=('intercept',), seed=seed, n_replicates=1)


def one_way_moments(data: LongDataset) -> Dict[str, float]:
    """Closed-form balanced one-way ANOVA estimators of (sigma_b2, sigma_e2)"""
    by_subject: Dict[str, List[float]] = {}
    for obs in data.rows:
        by_subject.setdefault(obs.subject_id, []).append(obs.response)
    groups = list(by_subject.values())
    g, m = len(groups), len(groups[0])
    grand = sum(sum(values) for values in groups) / (g * m)
    means = [sum(values) / m for values in groups]
    ms_between = m * sum((mean - grand) ** 2 for mean in means) / (g - 1)
    ms_within = sum((v - mean) ** 2 for values, mean in zip(groups, means) for v in values) / (g * (m - 1))
    return {'sigma_b2': (ms_between - ms_within) / m, 'sigma_e2': ms_within}


def write_csv(path: Path, data: LongDataset) -> str:
    write_long_csv(data, str(path))
    return str(path)


def with_responses(data: LongDataset, transform) -> LongDataset:
    return data.with_responses([transform(obs) for obs in data.rows])


def single_point_series(n_subjects: int = 6) -> LongDataset:
    """Every (subject, day) series has one measurement"""
    observations = [Observation(subject_id=f"s{i + 1}", day=day, time_point=0, hour_actual=0.0,
                                smoker=i % 2 == 0, response=4.0 + 0.1 * i + 0.05 * day + 0.01 * (i * day % 3))
                    for i in range(n_subjects) for day in (1, 2, 3)]
    return LongDataset.build(observations)
