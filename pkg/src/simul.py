"""Parametric simulation of the crossover design and Monte-Carlo studies
(parameter recovery, covariance selection, effect-modification power, whitening
calibration).

Random numbers come from numpy's counter-based Philox generator. Replicate r of
a study with seed s uses the key derived from SeedSequence([s, r]), so every
replicate is reproducible on its own, whatever order or thread runs it.
Normal variates use the inverse-CDF method with classical.normal_ppf.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .classical import normal_ppf
from .config import WORKERS, load_run_config
from .dataset import (CorrFamily, Grouping, LongDataset, Method, ModelSpec, Observation, encode_design,
                      parse_model_formula)
from .diagnostics import normalized_residuals, pooled_acf
from .errors import DegenerateSample, InvalidConfig, LongmixError
from .lmm import compare_by_aic, fit, stratified_fit, wald_intervals

logger = logging.getLogger(__name__)

# Hours since the day's baseline for time points 0..6
DEFAULT_HOURS = (0.0, 1.0, 2.0, 3.0, 4.0, 6.0, 28.0)

# Coefficients in the magnitude range seen for FEV1 in liters
DEFAULT_BETA = {
    'intercept': 4.2,
    'smoker': -0.1,
    'day2': -0.03,
    'day3': -0.08,
    'hour': -0.01,
    'day2:hour': 0.01,
    'day3:hour': 0.02,
}


@dataclass
class SimConfig:
    n_subjects: int = 200
    days: Tuple[int, ...] = (1, 2, 3)
    time_points: Tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6)
    hours: Tuple[float, ...] = DEFAULT_HOURS
    beta: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_BETA))
    sigma_b2: float = 0.64
    sigma_e2: float = 0.015
    rho: Optional[float] = 0.5
    family: CorrFamily = CorrFamily.AR1
    grouping: Grouping = Grouping.SUBJECT
    method: Method = Method.REML
    fixed_terms: Tuple[str, ...] = ('intercept', 'smoker', 'day', 'hour', 'day:hour')
    poly_degree: int = 1
    seed: int = 20190101
    n_replicates: int = 100
    smoker_effects: Dict[str, float] = field(default_factory=dict)
    candidates: Tuple[CorrFamily, ...] = (CorrFamily.AR1, CorrFamily.CS)
    level: float = 0.95

    def __post_init__(self):
        try:
            self.family = CorrFamily.parse(self.family)
            self.grouping = Grouping.parse(self.grouping)
            self.method = Method.parse(self.method)
            self.candidates = tuple(CorrFamily.parse(c) for c in self.candidates)
        except LongmixError as e:
            raise InvalidConfig(str(e))
        self.days = tuple(int(d) for d in self.days)
        self.time_points = tuple(int(t) for t in self.time_points)
        self.hours = tuple(float(h) for h in self.hours)
        self.fixed_terms = tuple(self.fixed_terms)
        self.beta = {str(k): float(v) for k, v in self.beta.items()}
        self.smoker_effects = {str(k): float(v) for k, v in self.smoker_effects.items()}
        self.validate()

    def validate(self) -> None:
        if self.n_subjects < 1 or self.n_replicates < 1:
            raise InvalidConfig("n_subjects and n_replicates must be at least 1")
        if not self.days or not set(self.days) <= {1, 2, 3} or len(set(self.days)) != len(self.days):
            raise InvalidConfig(f"days must be distinct values from 1, 2, 3; got {self.days}")
        if not self.time_points or len(set(self.time_points)) != len(self.time_points) \
                or not all(0 <= t <= 6 for t in self.time_points):
            raise InvalidConfig(f"time_points must be distinct indices in 0..6; got {self.time_points}")
        if len(self.hours) < 7:
            raise InvalidConfig("hours must give hour_actual for all seven time-point indices")
        if self.sigma_b2 < 0 or self.sigma_e2 < 0:
            raise InvalidConfig("Variances must be non-negative")
        if self.family == CorrFamily.AR1 and (self.rho is None or not -1 < self.rho < 1):
            raise InvalidConfig(f"AR1 rho must lie in (-1, 1), got {self.rho}")
        if self.family == CorrFamily.CS and (self.rho is None or not 0 <= self.rho < 1):
            raise InvalidConfig(f"Compound-symmetric rho must lie in [0, 1), got {self.rho}")
        if not 0 < self.level < 1:
            raise InvalidConfig(f"level must lie in (0, 1), got {self.level}")
        try:
            spec = self.model_spec
        except LongmixError as e:
            raise InvalidConfig(f"Invalid model terms: {e}")
        # The generating design must be encodable for the simulated layout
        if spec.has('smoker') and self.n_subjects < 2:
            raise InvalidConfig("Term 'smoker' needs n_subjects >= 2 so both smoker levels occur")
        if (spec.has('day') or spec.has('day:hour')) and len(self.days) < 2:
            raise InvalidConfig(f"Day terms need at least two simulated days; got {self.days}")

    @property
    def model_spec(self) -> ModelSpec:
        return ModelSpec(fixed_terms=self.fixed_terms, grouping=self.grouping, corr_family=self.family,
                         method=self.method, poly_degree=self.poly_degree)

    @classmethod
    def from_dict(cls, values: Dict) -> 'SimConfig':
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(values) - known
        if unknown:
            raise InvalidConfig(f"Unknown simulation settings: {sorted(unknown)}")
        values = dict(values)
        if isinstance(values.get('fixed_terms'), str):
            values['fixed_terms'] = parse_model_formula(values['fixed_terms'])
        return cls(**values)

    def to_dict(self) -> Dict:
        values = asdict(self)
        values['family'] = self.family.value
        values['grouping'] = self.grouping.value
        values['method'] = self.method.value
        values['candidates'] = [c.value for c in self.candidates]
        values['days'] = list(self.days)
        values['time_points'] = list(self.time_points)
        values['hours'] = list(self.hours)
        values['fixed_terms'] = list(self.fixed_terms)
        return values


def load_sim_config(path: str, overrides: Optional[Dict] = None) -> SimConfig:
    values = load_run_config(path)
    values = values.get('simulation', values)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return SimConfig.from_dict(values)


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(replicate)])))


def standard_normals(rng: np.random.Generator, size) -> np.ndarray:
    u = rng.random(size)
    u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
    return normal_ppf(u)


def ar1_noise(rng: np.random.Generator, n_series: int, length: int, rho: float, sigma: float) -> np.ndarray:
    """Stationary AR1 rows: e_0 = sigma z_0, e_t = rho e_{t-1} + sqrt(1 - rho^2) sigma z_t"""
    z = standard_normals(rng, (n_series, length))
    noise = np.empty((n_series, length))
    noise[:, 0] = sigma * z[:, 0]
    scale = math.sqrt(1.0 - rho ** 2) * sigma
    for t in range(1, length):
        noise[:, t] = rho * noise[:, t - 1] + scale * z[:, t]
    return noise


def _series_noise(rng: np.random.Generator, config: SimConfig, n_series: int, grid: int) -> np.ndarray:
    sigma = math.sqrt(config.sigma_e2)
    if config.family == CorrFamily.AR1:
        return ar1_noise(rng, n_series, grid, config.rho, sigma)
    if config.family == CorrFamily.CS:
        shared = standard_normals(rng, (n_series, 1))
        z = standard_normals(rng, (n_series, grid))
        return sigma * (math.sqrt(config.rho) * shared + math.sqrt(1.0 - config.rho) * z)
    return sigma * standard_normals(rng, (n_series, grid))


def simulate(config: SimConfig, replicate: int = 0) -> LongDataset:
    """
    Draw one dataset from the mixed model
    Args:
        config: Design, true parameters and seed
        replicate: Replicate index; selects an independent random stream
    Returns:
        LongDataset in the canonical layout
    """
    rng = replicate_rng(config.seed, replicate)
    n_smokers = config.n_subjects // 2
    skeleton = []
    for i in range(config.n_subjects):
        for day in config.days:
            for tp in config.time_points:
                skeleton.append(Observation(subject_id=f"s{i + 1}", day=day, time_point=tp,
                                            hour_actual=config.hours[tp], smoker=i < n_smokers,
                                            response=0.0))
    data = LongDataset.build(skeleton)
    design = encode_design(data, config.model_spec)

    unknown = (set(config.beta) | set(config.smoker_effects)) - set(design.column_names)
    if unknown:
        raise InvalidConfig(f"Coefficients {sorted(unknown)} are not columns of {list(design.column_names)}")
    beta = np.array([config.beta.get(name, 0.0) for name in design.column_names])
    offsets = np.array([config.smoker_effects.get(name, 0.0) for name in design.column_names])
    smoker_rows = np.array([obs.smoker for obs in data.rows], dtype=float)
    mean = design.X @ beta + smoker_rows * (design.X @ offsets)

    b = math.sqrt(config.sigma_b2) * standard_normals(rng, len(design.groups))
    intercepts = np.empty(design.n)
    for g, idx in enumerate(design.groups):
        intercepts[idx] = b[g]

    # Noise is drawn on the full index grid so gaps keep index-distance correlation
    first, last = min(config.time_points), max(config.time_points)
    noise = _series_noise(rng, config, len(design.series), last - first + 1)
    errors = np.empty(design.n)
    for s, idx in enumerate(design.series):
        errors[idx] = noise[s, design.time_points[idx] - first]

    return data.with_responses(mean + intercepts + errors)


def _true_beta(config: SimConfig, column_names: Sequence[str]) -> Dict[str, float]:
    return {name: config.beta.get(name, 0.0) for name in column_names}


@dataclass
class ReplicateOutcome:
    replicate: int
    estimates: Dict[str, float] = field(default_factory=dict)
    covered: Dict[str, bool] = field(default_factory=dict)
    selected: Optional[str] = None
    error: Optional[str] = None


def _run_replicate(config: SimConfig, replicate: int) -> ReplicateOutcome:
    outcome = ReplicateOutcome(replicate=replicate)
    try:
        data = simulate(config, replicate)
        spec = config.model_spec
        truth_fit = fit(data, spec)
    except LongmixError as e:
        logger.warning(f"Replicate {replicate} failed: {e.code}: {e}")
        outcome.error = e.code
        return outcome

    truth = _true_beta(config, truth_fit.column_names)
    table = wald_intervals(truth_fit, config.level)
    for row in table.rows:
        outcome.estimates[row.name] = row.estimate
        outcome.covered[row.name] = row.ci_low <= truth[row.name] <= row.ci_high
    outcome.estimates['sigma_b2'] = truth_fit.vparams.sigma_b2
    outcome.estimates['sigma_e2'] = truth_fit.vparams.sigma_e2
    if truth_fit.vparams.rho is not None:
        outcome.estimates['rho'] = truth_fit.vparams.rho

    candidates = {}
    for family in config.candidates:
        if family == config.family:
            candidates[family.value] = truth_fit
            continue
        try:
            candidates[family.value] = fit(data, spec.with_family(family))
        except LongmixError as e:
            logger.debug(f"Replicate {replicate}: candidate {family.value} failed: {e.code}")
    if candidates:
        ranking = compare_by_aic(list(candidates.values()), labels=list(candidates.keys()))
        outcome.selected = ranking[0]['label']
    return outcome


def _run_all(config: SimConfig, worker: Callable[[SimConfig, int], object],
             max_workers: Optional[int]) -> List:
    workers = max_workers or WORKERS
    replicates = range(config.n_replicates)
    if workers <= 1:
        return [worker(config, r) for r in replicates]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda r: worker(config, r), replicates))


@dataclass
class ParameterSummary:
    true_value: Optional[float]
    mean_estimate: float
    bias: Optional[float]
    mc_se: Optional[float]
    coverage: Optional[float]
    n: int


@dataclass
class StudyReport:
    config: Dict
    n_replicates: int
    n_failed: int
    failures: Dict[str, int]
    parameters: Dict[str, ParameterSummary]
    selection_counts: Dict[str, int]
    selection_frequencies: Dict[str, float]

    def to_dict(self) -> Dict:
        values = asdict(self)
        values['parameters'] = {name: asdict(summary) for name, summary in self.parameters.items()}
        return values


def recovery_study(config: SimConfig, max_workers: Optional[int] = None) -> StudyReport:
    """
    Simulate, refit and aggregate bias, Monte-Carlo SE, Wald coverage and AIC selection
    Args:
        config: Simulation configuration (n_replicates >= 2)
        max_workers: Thread-pool size; results do not depend on it
    Returns:
        StudyReport
    """
    if config.n_replicates < 2:
        raise InvalidConfig("A recovery study needs at least 2 replicates")
    outcomes: List[ReplicateOutcome] = _run_all(config, _run_replicate, max_workers)

    failures: Dict[str, int] = {}
    for outcome in outcomes:
        if outcome.error:
            failures[outcome.error] = failures.get(outcome.error, 0) + 1
    ok = [o for o in outcomes if o.error is None]

    truth_values = dict(config.beta)
    truth_values.update({'sigma_b2': config.sigma_b2, 'sigma_e2': config.sigma_e2})
    if config.family != CorrFamily.INDEPENDENT:
        truth_values['rho'] = config.rho

    parameters: Dict[str, ParameterSummary] = {}
    names = list(ok[0].estimates.keys()) if ok else []
    for name in names:
        values = np.array([o.estimates[name] for o in ok if name in o.estimates])
        true_value = truth_values.get(name, 0.0 if name in ok[0].covered else None)
        mc_se = float(np.std(values, ddof=1) / math.sqrt(len(values))) if len(values) > 1 else None
        coverage = None
        if name in ok[0].covered:
            coverage = float(np.mean([o.covered[name] for o in ok]))
        parameters[name] = ParameterSummary(
            true_value=true_value,
            mean_estimate=float(values.mean()),
            bias=float(values.mean() - true_value) if true_value is not None else None,
            mc_se=mc_se,
            coverage=coverage,
            n=len(values),
        )

    counts = {family.value: 0 for family in config.candidates}
    for o in ok:
        if o.selected is not None:
            counts[o.selected] = counts.get(o.selected, 0) + 1
    total = sum(counts.values())
    frequencies = {k: (v / total if total else 0.0) for k, v in counts.items()}

    logger.info(f"Recovery study: {len(ok)}/{len(outcomes)} replicates fitted; AIC selection {counts}")
    return StudyReport(
        config=config.to_dict(),
        n_replicates=len(outcomes),
        n_failed=len(outcomes) - len(ok),
        failures=failures,
        parameters=parameters,
        selection_counts=counts,
        selection_frequencies=frequencies,
    )


@dataclass
class PowerReport:
    stratum: str
    coefficient: str
    alpha: float
    n_replicates: int
    n_tested: int
    rejections: int
    rejection_rate: float
    failures: Dict[str, int]

    def to_dict(self) -> Dict:
        return asdict(self)


def power_study(config: SimConfig, stratum: str = 'smoker', coefficient: str = 'hour',
                alpha: float = 0.05, max_workers: Optional[int] = None) -> PowerReport:
    """Rejection rate of the between-stratum equal-coefficient z test"""
    def worker(cfg: SimConfig, replicate: int):
        try:
            result = stratified_fit(simulate(cfg, replicate), cfg.model_spec, stratum)
            p_value = result.difference(coefficient).p_value
            return p_value if p_value is not None else 'lmm.DegenerateStandardError'
        except LongmixError as e:
            return e.code
        except KeyError:
            return 'simul.MissingStratumFit'

    outcomes = _run_all(config, worker, max_workers)
    p_values = [o for o in outcomes if isinstance(o, float)]
    failures: Dict[str, int] = {}
    for o in outcomes:
        if not isinstance(o, float):
            key = str(o)
            failures[key] = failures.get(key, 0) + 1
    rejections = sum(1 for p in p_values if p < alpha)
    rate = rejections / len(p_values) if p_values else 0.0
    logger.info(f"Power study ({stratum}, {coefficient}): {rejections}/{len(p_values)} rejections")
    return PowerReport(stratum=stratum, coefficient=coefficient, alpha=alpha,
                       n_replicates=len(outcomes), n_tested=len(p_values), rejections=rejections,
                       rejection_rate=rate, failures=failures)


@dataclass
class AcfCalibration:
    n_replicates: int
    n_tested: int
    violations: int
    violation_rate: float
    failures: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)


def acf_calibration(config: SimConfig, lag: int = 1, max_workers: Optional[int] = None) -> AcfCalibration:
    """How often the lag-l ACF of normalized residuals from a correct fit exceeds 2/sqrt(n_pairs)"""
    def worker(cfg: SimConfig, replicate: int):
        try:
            data = simulate(cfg, replicate)
            fitted = fit(data, cfg.model_spec)
            design = encode_design(data, cfg.model_spec)
            residuals = normalized_residuals(fitted, data)
            point = pooled_acf(residuals, design.series, lag, design.time_points)[lag]
            if point.estimate is None or point.bound is None:
                raise DegenerateSample(f"No within-series pairs at lag {lag}")
            return bool(abs(point.estimate) > point.bound)
        except LongmixError as e:
            return e.code

    outcomes = _run_all(config, worker, max_workers)
    tested = [o for o in outcomes if isinstance(o, bool)]
    failures: Dict[str, int] = {}
    for o in outcomes:
        if not isinstance(o, bool):
            failures[o] = failures.get(o, 0) + 1
    if failures:
        logger.warning(f"ACF calibration: {sum(failures.values())} replicates untested {failures}")
    violations = sum(tested)
    return AcfCalibration(n_replicates=len(outcomes), n_tested=len(tested), violations=violations,
                          violation_rate=violations / len(tested) if tested else 0.0, failures=failures)
