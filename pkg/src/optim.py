"""Derivative-free minimization over transformed variance parameters."""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import OptimizeResult, minimize as scipy_minimize
from scipy.special import expit, logit

from .config import MAX_ITER, TOL_REL
from .dataset import CorrFamily
from .errors import DidNotConverge, DomainError, NonFiniteObjective

logger = logging.getLogger(__name__)


@dataclass
class OptimProblem:
    objective: Callable[[np.ndarray], float]
    dim: int
    starts: List[np.ndarray]
    tol_rel: float = TOL_REL
    max_iter: int = MAX_ITER

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.tol_rel <= 0:
            raise ValueError(f"tol_rel must be positive, got {self.tol_rel}")
        if not self.starts:
            raise ValueError("At least one start is required")
        self.starts = [np.atleast_1d(np.asarray(s, dtype=float)) for s in self.starts]
        for s in self.starts:
            if s.shape != (self.dim,):
                raise ValueError(f"Start {s} does not have dimension {self.dim}")


@dataclass
class StartOutcome:
    start: np.ndarray
    argmin: np.ndarray
    value: float
    iterations: int
    converged: bool
    history: List[float] = field(default_factory=list)


@dataclass
class OptimResult:
    argmin: np.ndarray
    value: float
    iterations: int
    converged: bool
    history: List[float]
    runs: List[StartOutcome]


def initial_simplex(x0: np.ndarray) -> np.ndarray:
    """Axis-aligned simplex with edge max(0.1, 0.1*|x0_i|) per coordinate"""
    x0 = np.asarray(x0, dtype=float)
    simplex = np.tile(x0, (len(x0) + 1, 1))
    for i in range(len(x0)):
        simplex[i + 1, i] += max(0.1, 0.1 * abs(x0[i]))
    return simplex


def _safe(objective: Callable[[np.ndarray], float]) -> Callable[[np.ndarray], float]:
    def wrapped(x: np.ndarray) -> float:
        value = float(objective(x))
        return value if math.isfinite(value) else math.inf
    return wrapped


def _run_start(problem: OptimProblem, x0: np.ndarray, f0: float) -> StartOutcome:
    history = [f0]

    def record(intermediate_result: OptimizeResult):
        history.append(float(intermediate_result.fun))

    scale_x = max(1.0, float(np.max(np.abs(x0))))
    scale_f = max(1.0, abs(f0))
    res = scipy_minimize(
        _safe(problem.objective),
        x0,
        method='Nelder-Mead',
        callback=record,
        options={
            'initial_simplex': initial_simplex(x0),
            'maxiter': problem.max_iter,
            'xatol': problem.tol_rel * scale_x,
            'fatol': problem.tol_rel * scale_f,
            'adaptive': False,
        },
    )
    return StartOutcome(
        start=x0,
        argmin=np.asarray(res.x, dtype=float),
        value=float(res.fun),
        iterations=int(res.nit),
        converged=bool(res.status == 0),
        history=history,
    )


def minimize(problem: OptimProblem) -> OptimResult:
    """
    Multi-start Nelder-Mead
    Args:
        problem: Objective, starts and tolerances
    Returns:
        Best result across starts (lowest value, ties broken by argmin)
    """
    evaluate = _safe(problem.objective)
    start_values = []
    for x0 in problem.starts:
        f0 = evaluate(x0)
        if not math.isfinite(f0):
            raise NonFiniteObjective(f"Objective is not finite at start {x0.tolist()}")
        start_values.append(f0)

    runs = []
    for i, (x0, f0) in enumerate(zip(problem.starts, start_values)):
        outcome = _run_start(problem, x0, f0)
        logger.debug(f"Start {i} {x0.tolist()}: value={outcome.value:.10g} "
                     f"iterations={outcome.iterations} converged={outcome.converged}")
        runs.append(outcome)

    if not any(run.converged for run in runs):
        raise DidNotConverge(
            f"Nelder-Mead did not converge from any of {len(runs)} starts within {problem.max_iter} iterations")

    best = min(runs, key=lambda run: (run.value, tuple(run.argmin.tolist())))
    # Another start reaching the same optimum within tolerance confirms convergence
    tolerance = problem.tol_rel * max(1.0, abs(best.value))
    converged = best.converged or any(run.converged and run.value <= best.value + tolerance for run in runs)

    return OptimResult(
        argmin=best.argmin,
        value=best.value,
        iterations=best.iterations,
        converged=converged,
        history=best.history,
        runs=runs,
    )


class ParamTransform:
    """Map (sigma_b2, sigma_e2, rho) to an unconstrained vector and back.

    AR1 uses atanh for rho, compound symmetry a logit on (0, 1), and the
    independent family drops rho.
    """

    def __init__(self, family: CorrFamily):
        self.family = CorrFamily.parse(family)

    @property
    def dim(self) -> int:
        return 2 if self.family == CorrFamily.INDEPENDENT else 3

    def check_domain(self, sigma_b2: float, sigma_e2: float, rho: Optional[float]) -> None:
        if not sigma_b2 > 0:
            raise DomainError(f"sigma_b2 must be positive for the transform, got {sigma_b2}")
        if not sigma_e2 > 0:
            raise DomainError(f"sigma_e2 must be positive, got {sigma_e2}")
        if self.family == CorrFamily.AR1:
            if rho is None or not -1.0 < rho < 1.0:
                raise DomainError(f"AR1 rho must lie in (-1, 1), got {rho}")
        elif self.family == CorrFamily.CS:
            if rho is None or not 0.0 < rho < 1.0:
                raise DomainError(f"Compound-symmetric rho must lie in (0, 1) for the transform, got {rho}")

    def forward(self, vp) -> np.ndarray:
        self.check_domain(vp.sigma_b2, vp.sigma_e2, vp.rho)
        values = [math.log(vp.sigma_b2), math.log(vp.sigma_e2)]
        if self.family == CorrFamily.AR1:
            values.append(math.atanh(vp.rho))
        elif self.family == CorrFamily.CS:
            values.append(float(logit(vp.rho)))
        return np.array(values)

    def inverse(self, z: Sequence[float]) -> Tuple[float, float, Optional[float]]:
        sigma_b2 = math.exp(z[0])
        sigma_e2 = math.exp(z[1])
        if self.family == CorrFamily.AR1:
            return sigma_b2, sigma_e2, math.tanh(z[2])
        if self.family == CorrFamily.CS:
            return sigma_b2, sigma_e2, float(expit(z[2]))
        return sigma_b2, sigma_e2, None


def transform_roundtrip(vp, family: CorrFamily):
    """inverse(forward(vp)); raises DomainError at the boundary"""
    transform = ParamTransform(family)
    sigma_b2, sigma_e2, rho = transform.inverse(transform.forward(vp))
    return type(vp)(sigma_b2=sigma_b2, sigma_e2=sigma_e2, rho=rho)
