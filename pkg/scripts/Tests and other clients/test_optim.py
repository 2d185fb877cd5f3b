"""Tests for the multi-start Nelder-Mead wrapper and the variance-parameter transform."""
import math
import sys
from pathlib import Path

import numpy as np
import pytest

# Add the project root to Python path
project_root = str(Path(__file__).parents[2])
sys.path.insert(0, project_root)

from src.dataset import CorrFamily
from src.errors import DidNotConverge, DomainError, NonFiniteObjective
from src.lmm import VarianceParams
from src.optim import OptimProblem, ParamTransform, initial_simplex, minimize, transform_roundtrip


def rosenbrock(x):
    return (1.0 - x[0]) ** 2 + 100.0 * (x[1] - x[0] ** 2) ** 2


def bimodal(x):
    return min((x[0] + 1.0) ** 2, (x[0] - 1.0) ** 2 + 1.0)


def test_quadratic_minimum():
    result = minimize(OptimProblem(objective=lambda x: (x[0] - 2.0) ** 2, dim=1, starts=[[0.0]]))
    assert result.converged
    assert result.argmin[0] == pytest.approx(2.0, abs=1e-6)


def test_rosenbrock():
    result = minimize(OptimProblem(objective=rosenbrock, dim=2, starts=[[-1.2, 1.0]], max_iter=5000))
    np.testing.assert_allclose(result.argmin, [1.0, 1.0], atol=1e-4)


def test_multi_start_picks_lower_branch():
    result = minimize(OptimProblem(objective=bimodal, dim=1, starts=[[0.9], [-0.9]]))
    assert result.argmin[0] == pytest.approx(-1.0, abs=1e-5)
    assert result.value == pytest.approx(0.0, abs=1e-10)
    assert len(result.runs) == 2


def test_result_independent_of_start_order():
    first = minimize(OptimProblem(objective=bimodal, dim=1, starts=[[0.9], [-0.9]]))
    second = minimize(OptimProblem(objective=bimodal, dim=1, starts=[[-0.9], [0.9]]))
    np.testing.assert_array_equal(first.argmin, second.argmin)
    assert first.value == second.value


def test_never_worse_than_best_start():
    starts = [[3.0, -2.0], [0.5, 0.5]]
    result = minimize(OptimProblem(objective=rosenbrock, dim=2, starts=starts, max_iter=5000))
    assert result.value <= min(rosenbrock(np.array(s)) for s in starts)


def test_history_never_increases():
    result = minimize(OptimProblem(objective=rosenbrock, dim=2, starts=[[-1.2, 1.0]], max_iter=5000))
    history = np.array(result.history)
    assert np.all(np.diff(history) <= 1e-12)


def test_more_iterations_never_worsen_value():
    short = minimize(OptimProblem(objective=rosenbrock, dim=2, starts=[[-1.2, 1.0]], max_iter=5000))
    long = minimize(OptimProblem(objective=rosenbrock, dim=2, starts=[[-1.2, 1.0]], max_iter=10000))
    assert long.value <= short.value


def test_non_finite_start_is_rejected():
    with pytest.raises(NonFiniteObjective):
        minimize(OptimProblem(objective=lambda x: math.nan, dim=1, starts=[[0.0]]))


def test_iteration_budget_exhausted():
    with pytest.raises(DidNotConverge):
        minimize(OptimProblem(objective=rosenbrock, dim=2, starts=[[-1.2, 1.0]], max_iter=3))


def test_initial_simplex_edges():
    simplex = initial_simplex(np.array([0.0, 5.0]))
    np.testing.assert_allclose(simplex[1] - simplex[0], [0.1, 0.0])
    np.testing.assert_allclose(simplex[2] - simplex[0], [0.0, 0.5])


def test_roundtrip_fixed_point():
    vp = VarianceParams(1.0, 1.0, 0.0)
    assert transform_roundtrip(vp, CorrFamily.AR1) == vp


def test_roundtrip_arithmetic():
    back = transform_roundtrip(VarianceParams(0.04, 0.01, 0.5), CorrFamily.AR1)
    assert back.sigma_b2 == pytest.approx(0.04, abs=1e-12)
    assert back.sigma_e2 == pytest.approx(0.01, abs=1e-12)
    assert back.rho == pytest.approx(0.5, abs=1e-12)


def test_roundtrip_compound_symmetry():
    back = transform_roundtrip(VarianceParams(0.2, 0.3, 0.25), CorrFamily.CS)
    assert back.rho == pytest.approx(0.25, abs=1e-12)


def test_boundary_rho_is_rejected():
    with pytest.raises(DomainError):
        transform_roundtrip(VarianceParams(1.0, 1.0, 1.0), CorrFamily.AR1)


def test_independent_family_drops_rho():
    transform = ParamTransform(CorrFamily.INDEPENDENT)
    assert transform.dim == 2
    assert transform.inverse(transform.forward(VarianceParams(0.5, 0.25)))[2] is None


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v']))
