"""Linear mixed-effects model with a random intercept and AR1 / compound-symmetric
residual correlation, fitted by REML or ML.

    y = X beta + Z b + e,   b ~ N(0, sigma_b2) per group,   e ~ N(0, sigma_e2 R(rho)) per series

Residual correlation never spans treatment days: within a group the marginal
covariance is sigma_b2 * J plus sigma_e2 times the block-diagonal of the per-day
series correlation matrices.
"""
import logging
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, ROUND_HALF_UP, Decimal
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import block_diag, solve_triangular

from .classical import normal_ppf, two_sided_normal_p
from .config import FIT_SCHEMA, MAX_ITER, TOL_REL
from .dataset import (CorrFamily, DesignMatrices, GroupPattern, LongDataset, Method, ModelSpec,
                      encode_design)
from .errors import (IdentifiabilityError, IncomparableModels, InvalidModelSpec, LongmixError,
                     NonPositiveDefiniteV, RhoOutOfDomain, SingleLevelFactor, SingularDesign)
from .optim import OptimProblem, ParamTransform, minimize

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
SIGMA_B2_BOUNDARY = 1e-10
RHO_BOUNDARY = 1.0 - 1e-6


@dataclass(frozen=True)
class VarianceParams:
    sigma_b2: float
    sigma_e2: float
    rho: Optional[float] = None

    def validate(self, family: CorrFamily) -> None:
        if not self.sigma_e2 > 0:
            raise RhoOutOfDomain(f"sigma_e2 must be positive, got {self.sigma_e2}")
        if not self.sigma_b2 >= 0:
            raise RhoOutOfDomain(f"sigma_b2 must be non-negative, got {self.sigma_b2}")
        check_rho(family, self.rho)

    def to_dict(self) -> Dict:
        return {'sigma_b2': self.sigma_b2, 'sigma_e2': self.sigma_e2, 'rho': self.rho}


def check_rho(family: CorrFamily, rho: Optional[float]) -> None:
    family = CorrFamily.parse(family)
    if family == CorrFamily.INDEPENDENT:
        return
    if rho is None or not math.isfinite(rho):
        raise RhoOutOfDomain(f"{family.value} correlation needs a finite rho, got {rho}")
    if family == CorrFamily.AR1 and not -1.0 < rho < 1.0:
        raise RhoOutOfDomain(f"AR1 rho must lie in (-1, 1), got {rho}")
    if family == CorrFamily.CS and not 0.0 <= rho < 1.0:
        raise RhoOutOfDomain(f"Compound-symmetric rho must lie in [0, 1), got {rho}")


def correlation_from_times(family: CorrFamily, rho: Optional[float], times: Sequence[float]) -> np.ndarray:
    """Within-series correlation using time-point index distance as the lag"""
    family = CorrFamily.parse(family)
    check_rho(family, rho)
    t = np.asarray(times, dtype=float)
    lags = np.abs(t[:, None] - t[None, :])
    if family == CorrFamily.AR1:
        return np.power(rho, lags)
    if family == CorrFamily.CS:
        return np.where(lags == 0, 1.0, rho)
    return np.eye(len(t))


def correlation_matrix(family: CorrFamily, rho: Optional[float], n: int) -> np.ndarray:
    if n < 1:
        raise ValueError(f"Series length must be >= 1, got {n}")
    return correlation_from_times(family, rho, np.arange(n))


def pattern_covariance(vp: VarianceParams, family: CorrFamily, pattern: GroupPattern) -> np.ndarray:
    """sigma_b2 * J + sigma_e2 * blockdiag(R per day series) for one group layout"""
    blocks = [correlation_from_times(family, vp.rho, times) for times in pattern.series_times]
    m = pattern.size
    return vp.sigma_b2 * np.ones((m, m)) + vp.sigma_e2 * block_diag(*blocks)


def marginal_covariance(vp: VarianceParams, design: DesignMatrices, family: CorrFamily) -> List[np.ndarray]:
    """
    Marginal covariance block of every random-intercept group
    Args:
        vp: Variance parameters
        design: Design with group partition and per-group series layout
        family: Residual correlation family
    Returns:
        One V block per group, in design.groups order
    """
    family = CorrFamily.parse(family)
    vp.validate(family)
    blocks: List[Optional[np.ndarray]] = [None] * len(design.groups)
    for pattern in design.patterns:
        V = pattern_covariance(vp, family, pattern)
        for g in pattern.group_index:
            blocks[int(g)] = V
    return blocks


@dataclass
class GlsResult:
    beta: np.ndarray
    beta_cov: np.ndarray
    rss: float
    logdet_v: float
    logdet_xtvx: float


def _cholesky(V: np.ndarray) -> np.ndarray:
    try:
        L = np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        raise NonPositiveDefiniteV("Marginal covariance block is not positive definite")
    if not np.all(np.isfinite(L)):
        raise NonPositiveDefiniteV("Marginal covariance block has a non-finite Cholesky factor")
    return L


def _solve_whitened(Xw: np.ndarray, yw: np.ndarray, logdet_v: float) -> GlsResult:
    if Xw.shape[0] < Xw.shape[1]:
        raise SingularDesign(f"{Xw.shape[0]} observations cannot identify {Xw.shape[1]} fixed effects")
    Q, R = np.linalg.qr(Xw)
    r_diag = np.abs(np.diag(R))
    if r_diag.min() <= 1e-10 * max(r_diag.max(), 1e-300):
        raise SingularDesign("Fixed-effects design is rank deficient")
    beta = solve_triangular(R, Q.T @ yw, lower=False)
    R_inv = solve_triangular(R, np.eye(R.shape[0]), lower=False)
    beta_cov = R_inv @ R_inv.T
    resid = yw - Xw @ beta
    return GlsResult(
        beta=beta,
        beta_cov=0.5 * (beta_cov + beta_cov.T),
        rss=float(resid @ resid),
        logdet_v=logdet_v,
        logdet_xtvx=float(2.0 * np.sum(np.log(r_diag))),
    )


def gls_estimate(X: np.ndarray, y: np.ndarray, V_blocks: Sequence[np.ndarray],
                 groups: Optional[Sequence[np.ndarray]] = None) -> GlsResult:
    """
    Generalized least squares through per-block Cholesky whitening
    Args:
        X: n x p fixed-effects matrix
        y: Response vector
        V_blocks: Covariance block per group
        groups: Row indices of each block; consecutive rows when omitted
    Returns:
        GlsResult with beta = (X'V^-1 X)^-1 X'V^-1 y and beta_cov = (X'V^-1 X)^-1
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    if groups is None:
        bounds = np.cumsum([0] + [len(V) for V in V_blocks])
        groups = [np.arange(bounds[i], bounds[i + 1]) for i in range(len(V_blocks))]

    Xw_parts, yw_parts = [], []
    logdet_v = 0.0
    for V, idx in zip(V_blocks, groups):
        L = _cholesky(np.asarray(V, dtype=float))
        Xw_parts.append(solve_triangular(L, X[idx], lower=True))
        yw_parts.append(solve_triangular(L, y[idx], lower=True))
        logdet_v += 2.0 * float(np.sum(np.log(np.diag(L))))
    return _solve_whitened(np.vstack(Xw_parts), np.concatenate(yw_parts), logdet_v)


def _whitened_system(vp: VarianceParams, design: DesignMatrices,
                     family: CorrFamily) -> Tuple[np.ndarray, np.ndarray, float]:
    """Whiten all groups sharing a layout with a single Cholesky factor"""
    Xw_parts, yw_parts = [], []
    logdet_v = 0.0
    p = design.p
    for pattern in design.patterns:
        L = _cholesky(pattern_covariance(vp, family, pattern))
        n_groups, m = pattern.rows.shape
        Xg = design.X[pattern.rows]                      # (G, m, p)
        stacked = np.concatenate([Xg, design.y[pattern.rows][:, :, None]], axis=2)
        rhs = stacked.transpose(1, 0, 2).reshape(m, n_groups * (p + 1))
        solved = solve_triangular(L, rhs, lower=True).reshape(m, n_groups, p + 1).transpose(1, 0, 2)
        solved = solved.reshape(n_groups * m, p + 1)
        Xw_parts.append(solved[:, :p])
        yw_parts.append(solved[:, p])
        logdet_v += n_groups * 2.0 * float(np.sum(np.log(np.diag(L))))
    return np.vstack(Xw_parts), np.concatenate(yw_parts), logdet_v


def objective(vp: VarianceParams, design: DesignMatrices, family: CorrFamily,
              method: Method = Method.REML) -> float:
    """
    Negative (restricted) log-likelihood
        -2 l_R = (n - p) log 2pi + log|V| + log|X'V^-1 X| + r'V^-1 r
        -2 l   =  n      log 2pi + log|V| + r'V^-1 r
    """
    family = CorrFamily.parse(family)
    method = Method.parse(method)
    vp.validate(family)
    Xw, yw, logdet_v = _whitened_system(vp, design, family)
    gls = _solve_whitened(Xw, yw, logdet_v)
    if method == Method.REML:
        value = (design.n - design.p) * LOG_2PI + gls.logdet_v + gls.logdet_xtvx + gls.rss
    else:
        value = design.n * LOG_2PI + gls.logdet_v + gls.rss
    return 0.5 * value


@dataclass
class FittedModel:
    spec: ModelSpec
    column_names: Tuple[str, ...]
    beta: np.ndarray
    beta_cov: np.ndarray
    vparams: VarianceParams
    loglik: float
    n_obs: int
    n_groups: int
    p: int
    k_var: int
    converged: bool
    iterations: int
    n_starts: int
    boundary_flags: List[str] = field(default_factory=list)
    history: List[float] = field(default_factory=list)

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.beta_cov), 0.0, None))

    def coefficient(self, name: str) -> Tuple[float, float]:
        i = self.column_names.index(name)
        return float(self.beta[i]), float(self.std_errors[i])

    def to_dict(self, level: float = 0.95) -> Dict:
        criteria = information_criteria(self)
        table = wald_intervals(self, level)
        return {
            'schema': FIT_SCHEMA,
            'spec': self.spec.to_dict(),
            'n_obs': self.n_obs,
            'n_groups': self.n_groups,
            'p': self.p,
            'k_var': self.k_var,
            'level': level,
            'coefficients': table.to_list(),
            'variance_params': self.vparams.to_dict(),
            'loglik': self.loglik,
            'aic': criteria['AIC'],
            'bic': criteria['BIC'],
            'beta_cov': self.beta_cov.tolist(),
            'convergence': {
                'converged': self.converged,
                'iterations': self.iterations,
                'n_starts': self.n_starts,
                'boundary_flags': list(self.boundary_flags),
            },
        }


def _k_var(family: CorrFamily) -> int:
    return 2 if family == CorrFamily.INDEPENDENT else 3


def _starting_values(design: DesignMatrices, family: CorrFamily) -> List[VarianceParams]:
    """Variance-ratio heuristics from OLS residuals crossed with rho in {0, 0.5, -0.5}"""
    beta_ols, *_ = np.linalg.lstsq(design.X, design.y, rcond=None)
    r = design.y - design.X @ beta_ols
    dof = max(design.n - design.p, 1)
    s2 = max(float(r @ r) / dof, 1e-8)

    pair_sum, pair_count = 0.0, 0
    for idx in design.groups:
        rg = r[idx]
        pair_sum += 0.5 * (rg.sum() ** 2 - rg @ rg)
        pair_count += len(idx) * (len(idx) - 1) // 2
    share = pair_sum / pair_count / s2 if pair_count else 0.5
    share = min(max(share, 0.1), 0.9)

    ratios = [share, 0.5]
    rhos = {
        CorrFamily.AR1: [0.0, 0.5, -0.5],
        CorrFamily.CS: [0.05, 0.5],
        CorrFamily.INDEPENDENT: [None],
    }[family]
    combos = [(ratios[0], rho) for rho in rhos] + [(ratios[1], rho) for rho in rhos[:2]]

    starts = []
    for ratio, rho in combos:
        vp = VarianceParams(sigma_b2=ratio * s2, sigma_e2=(1.0 - ratio) * s2, rho=rho)
        if vp not in starts:
            starts.append(vp)
    return starts


def fit(data: LongDataset, spec: ModelSpec, tol_rel: float = TOL_REL, max_iter: int = MAX_ITER) -> FittedModel:
    """
    Fit the mixed model by minimizing the (restricted) negative log-likelihood
    Args:
        data: Validated dataset
        spec: Fixed terms, grouping, correlation family and method
        tol_rel: Relative simplex tolerance
        max_iter: Nelder-Mead iterations per start
    Returns:
        FittedModel with back-transformed variance parameters
    """
    design = encode_design(data, spec)
    family = spec.corr_family
    if family != CorrFamily.INDEPENDENT and design.max_series_length < 2:
        raise IdentifiabilityError(
            f"Every series has a single measurement; {family.value} correlation is not identifiable")
    # Rank problems are data errors, not optimizer failures
    _solve_whitened(design.X, design.y, 0.0)

    transform = ParamTransform(family)

    def evaluate(z: np.ndarray) -> float:
        sigma_b2, sigma_e2, rho = transform.inverse(z)
        try:
            with np.errstate(over='ignore', invalid='ignore', divide='ignore'):
                return objective(VarianceParams(sigma_b2, sigma_e2, rho), design, family, spec.method)
        except (NonPositiveDefiniteV, RhoOutOfDomain, OverflowError, ValueError):
            return math.inf

    starts = _starting_values(design, family)
    problem = OptimProblem(
        objective=evaluate,
        dim=transform.dim,
        starts=[transform.forward(vp) for vp in starts],
        tol_rel=tol_rel,
        max_iter=max_iter,
    )
    result = minimize(problem)

    sigma_b2, sigma_e2, rho = transform.inverse(result.argmin)
    vp = VarianceParams(sigma_b2=sigma_b2, sigma_e2=sigma_e2, rho=rho)
    gls = gls_estimate(design.X, design.y, marginal_covariance(vp, design, family), design.groups)
    loglik = -objective(vp, design, family, spec.method)

    flags = []
    if vp.sigma_b2 < SIGMA_B2_BOUNDARY:
        flags.append('sigma_b2_at_zero')
        logger.warning(f"Random-intercept variance at the boundary ({vp.sigma_b2:.3g})")
    if vp.rho is not None and abs(vp.rho) > RHO_BOUNDARY:
        flags.append('rho_at_boundary')
        logger.warning(f"Correlation parameter at the boundary ({vp.rho:.8f})")

    fitted = FittedModel(
        spec=spec,
        column_names=design.column_names,
        beta=gls.beta,
        beta_cov=gls.beta_cov,
        vparams=vp,
        loglik=loglik,
        n_obs=design.n,
        n_groups=len(design.groups),
        p=design.p,
        k_var=_k_var(family),
        converged=result.converged,
        iterations=result.iterations,
        n_starts=len(starts),
        boundary_flags=flags,
        history=result.history,
    )
    logger.info(f"Fitted {family.value}/{spec.method.value} ({spec.formula}): loglik={loglik:.4f} "
                f"sigma_b2={vp.sigma_b2:.4g} sigma_e2={vp.sigma_e2:.4g} rho={vp.rho} "
                f"iterations={result.iterations}")
    return fitted


@dataclass
class EffectRow:
    name: str
    estimate: float
    std_error: float
    z_value: Optional[float]
    p_value: Optional[float]
    ci_low: float
    ci_high: float
    degenerate: bool = False

    def to_dict(self) -> Dict:
        return {
            'name': self.name,
            'estimate': self.estimate,
            'std_error': self.std_error,
            'z_value': self.z_value,
            'p_value': self.p_value,
            'ci_low': self.ci_low,
            'ci_high': self.ci_high,
            'degenerate': self.degenerate,
            'formatted': format_effect(self),
        }


@dataclass
class EffectTable:
    rows: List[EffectRow]
    level: float

    def row(self, name: str) -> EffectRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def to_list(self) -> List[Dict]:
        return [row.to_dict() for row in self.rows]


def effect_row(name: str, estimate: float, std_error: float, level: float = 0.95) -> EffectRow:
    z = normal_ppf((1.0 + level) / 2.0)
    if std_error <= 0.0:
        return EffectRow(name=name, estimate=estimate, std_error=0.0, z_value=None, p_value=None,
                         ci_low=estimate, ci_high=estimate, degenerate=True)
    half = z * std_error
    z_value = estimate / std_error
    return EffectRow(name=name, estimate=estimate, std_error=std_error, z_value=z_value,
                     p_value=two_sided_normal_p(z_value), ci_low=estimate - half, ci_high=estimate + half)


def wald_intervals(fit: FittedModel, level: float = 0.95) -> EffectTable:
    """estimate +/- z_{(1+level)/2} * se for every fixed effect"""
    if not 0.0 <= level < 1.0:
        raise ValueError(f"Confidence level must lie in [0, 1), got {level}")
    ses = fit.std_errors
    rows = [effect_row(name, float(b), float(se), level)
            for name, b, se in zip(fit.column_names, fit.beta, ses)]
    return EffectTable(rows=rows, level=level)


def _report_round(value: float, digits: int) -> str:
    # Tabled values carry one extra decimal; text rounds those half away from zero
    table = Decimal(repr(value)).quantize(Decimal(1).scaleb(-(digits + 1)), rounding=ROUND_HALF_EVEN)
    text = table.quantize(Decimal(1).scaleb(-digits), rounding=ROUND_HALF_UP)
    if text == 0:
        text = abs(text)
    return f"{text:.{digits}f}"


def format_effect(row: EffectRow, digits: int = 2) -> str:
    """Render 'estimate(ci_low,ci_high)', e.g. -0.08(-0.16,-0.01)"""
    return (f"{_report_round(row.estimate, digits)}"
            f"({_report_round(row.ci_low, digits)},{_report_round(row.ci_high, digits)})")


def information_criteria(fit: FittedModel) -> Dict[str, float]:
    """AIC = -2l + 2k, BIC = -2l + k log(n_eff); n_eff = n - p under REML"""
    k = fit.p + fit.k_var
    n_eff = fit.n_obs - fit.p if fit.spec.method == Method.REML else fit.n_obs
    return {
        'AIC': -2.0 * fit.loglik + 2.0 * k,
        'BIC': -2.0 * fit.loglik + k * math.log(max(n_eff, 1)),
    }


def compare_by_aic(fits: Sequence[FittedModel], labels: Optional[Sequence[str]] = None) -> List[Dict]:
    """
    Rank candidate fits by AIC
    Args:
        fits: Candidate models fitted to the same data
        labels: Optional display labels
    Returns:
        Rows sorted by AIC with delta_aic and a selected flag on the winner
    """
    if not fits:
        return []
    methods = {f.spec.method for f in fits}
    if len(methods) > 1:
        raise IncomparableModels("Cannot compare AIC across REML and ML fits")
    if Method.REML in methods and len({f.column_names for f in fits}) > 1:
        raise IncomparableModels(
            "REML log-likelihoods are not comparable across different fixed-effect specifications; "
            "refit with --method ml to compare mean models")

    labels = list(labels) if labels is not None else [
        f"{f.spec.corr_family.value}: {f.spec.formula}" for f in fits]
    rows = []
    for label, f in zip(labels, fits):
        criteria = information_criteria(f)
        rows.append({'label': label, 'corr_family': f.spec.corr_family.value,
                     'fixed_terms': list(f.spec.fixed_terms), 'loglik': f.loglik,
                     'aic': criteria['AIC'], 'bic': criteria['BIC']})
    rows.sort(key=lambda r: (r['aic'], r['label']))
    for r in rows:
        r['delta_aic'] = r['aic'] - rows[0]['aic']
        r['selected'] = r is rows[0]
    return rows


@dataclass
class CovarianceSelection:
    best: FittedModel
    fits: Dict[str, FittedModel]
    failures: Dict[str, str]
    table: List[Dict]


def select_covariance(data: LongDataset, spec: ModelSpec,
                      families: Sequence[CorrFamily] = (CorrFamily.AR1, CorrFamily.CS),
                      tol_rel: float = TOL_REL, max_iter: int = MAX_ITER) -> CovarianceSelection:
    """Fit each correlation family with the same mean model and keep the AIC winner"""
    fits: Dict[str, FittedModel] = {}
    failures: Dict[str, str] = {}
    first_error: Optional[LongmixError] = None
    for family in families:
        family = CorrFamily.parse(family)
        try:
            fits[family.value] = fit(data, spec.with_family(family), tol_rel, max_iter)
        except LongmixError as e:
            logger.warning(f"{family.value} candidate failed: {e.code}: {e}")
            failures[family.value] = e.code
            first_error = first_error or e
    if not fits:
        raise first_error
    table = compare_by_aic(list(fits.values()), labels=list(fits.keys()))
    best_label = table[0]['label']
    logger.info(f"AIC selects {best_label} among {list(fits.keys())}")
    return CovarianceSelection(best=fits[best_label], fits=fits, failures=failures, table=table)


@dataclass
class CoefficientDifference:
    name: str
    first: str
    second: str
    estimate_first: float
    estimate_second: float
    difference: float
    std_error: float
    z_value: Optional[float]
    p_value: Optional[float]


@dataclass
class StratifiedResult:
    stratum: str
    spec: ModelSpec
    fits: Dict[str, FittedModel]
    failures: Dict[str, Dict[str, str]]
    differences: List[CoefficientDifference]

    def difference(self, name: str) -> CoefficientDifference:
        for diff in self.differences:
            if diff.name == name:
                return diff
        raise KeyError(name)

    def to_dict(self, level: float = 0.95) -> Dict:
        return {
            'stratum': self.stratum,
            'spec': self.spec.to_dict(),
            'fits': {label: f.to_dict(level) for label, f in self.fits.items()},
            'failures': self.failures,
            'differences': [diff.__dict__.copy() for diff in self.differences],
        }


def _stratum_label(stratum: str, level) -> str:
    if stratum == 'smoker':
        return 'smoker' if level else 'nonsmoker'
    return f"{stratum}{level}"


def stratified_fit(data: LongDataset, spec: ModelSpec, stratum: str = 'smoker',
                   tol_rel: float = TOL_REL, max_iter: int = MAX_ITER) -> StratifiedResult:
    """
    Fit the model separately within each level of a covariate
    Args:
        data: Full dataset
        spec: Model specification; the stratum's own terms are removed
        stratum: 'smoker' or 'day'
    Returns:
        StratifiedResult with per-level fits, labelled failures and coefficient difference tests
    """
    if stratum not in ('smoker', 'day'):
        raise InvalidModelSpec(f"Cannot stratify by '{stratum}' (use smoker or day)")
    levels = data.stratum_levels(stratum)
    if len(levels) < 2:
        raise SingleLevelFactor(f"Stratum '{stratum}' has a single observed level", column=stratum)
    within_spec = spec.without(stratum)

    fits: Dict[str, FittedModel] = {}
    failures: Dict[str, Dict[str, str]] = {}
    for level in levels:
        label = _stratum_label(stratum, level)
        try:
            fits[label] = fit(data.stratum(stratum, level), within_spec, tol_rel, max_iter)
        except LongmixError as e:
            logger.warning(f"Stratum {label} failed: {e.code}: {e}")
            failures[label] = {'code': e.code, 'message': str(e)}

    differences = []
    labels = list(fits.keys())
    for i in range(len(labels)):
        for j in range(i + 1, len(labels)):
            a, b = fits[labels[i]], fits[labels[j]]
            for name in a.column_names:
                if name not in b.column_names:
                    continue
                est_a, se_a = a.coefficient(name)
                est_b, se_b = b.coefficient(name)
                se = math.sqrt(se_a ** 2 + se_b ** 2)
                diff = est_a - est_b
                z = diff / se if se > 0 else None
                differences.append(CoefficientDifference(
                    name=name, first=labels[i], second=labels[j],
                    estimate_first=est_a, estimate_second=est_b, difference=diff, std_error=se,
                    z_value=z, p_value=two_sided_normal_p(z) if z is not None else None,
                ))

    return StratifiedResult(stratum=stratum, spec=within_spec, fits=fits, failures=failures,
                            differences=differences)
