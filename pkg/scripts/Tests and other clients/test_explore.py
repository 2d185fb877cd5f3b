"""Tests for mean profiles, the empirical covariance table and scatter pairs."""
import sys
from pathlib import Path

import numpy as np
import pytest

# Add the project root to Python path
project_root = str(Path(__file__).parents[2])
sys.path.insert(0, project_root)
sys.path.insert(0, str(Path(__file__).parent))

from sample_data import kerr_layout, simulated, with_responses
from src.dataset import LongDataset, ModelSpec, Observation, encode_design
from src.errors import EmptyDataset, InsufficientReplicates
from src.explore import (empirical_cov_corr, mean_profiles, pairwise_scatter_data, residual_cov_corr,
                         scatter_frame)


def obs(subject, day, tp, response):
    return Observation(subject_id=subject, day=day, time_point=tp, hour_actual=float(tp), smoker=False,
                       response=response)


def test_mean_of_two_subjects():
    table = mean_profiles(LongDataset.build([obs('s1', 1, 0, 4.0), obs('s2', 1, 0, 4.2)]))
    entry = table.entries[(1, 0)]
    assert entry.mean == pytest.approx(4.1)
    assert entry.n == 2
    assert entry.sd == pytest.approx(np.std([4.0, 4.2], ddof=1))


def test_single_subject_sd_is_null():
    table = mean_profiles(LongDataset.build([obs('s1', 1, 0, 4.0), obs('s1', 2, 0, 4.2)]))
    assert table.entries[(2, 0)].sd is None
    frame = table.to_frame()
    assert list(frame.columns) == ['day', 'time_point', 'mean', 'sd', 'n']
    assert len(frame) == 2


def test_perfectly_correlated_series():
    residuals = [0.0, 1.0, -1.0, 1.0, 2.0, 0.0, 3.0, 4.0, 2.0]
    keys = [('a', 1)] * 3 + [('b', 1)] * 3 + [('c', 1)] * 3
    matrix = residual_cov_corr(residuals, keys, [0, 1, 2] * 3)
    np.testing.assert_allclose(matrix.corr, np.ones((3, 3)), atol=1e-12)


def test_two_series_hand_computed():
    matrix = residual_cov_corr([1.0, -1.0, -1.0, 1.0], [('a', 1), ('a', 1), ('b', 1), ('b', 1)], [0, 1, 0, 1])
    assert matrix.cov[0, 0] == pytest.approx(2.0)
    assert matrix.corr[0, 1] == pytest.approx(-1.0)
    presentation = matrix.presentation()
    assert presentation[0, 1] == pytest.approx(-2.0)
    assert presentation[1, 0] == pytest.approx(-1.0)
    assert presentation[1, 1] == pytest.approx(2.0)


def test_matches_double_loop_covariance():
    data = simulated()
    spec = ModelSpec()
    matrix = empirical_cov_corr(data, spec)
    design = encode_design(data, spec)
    beta, *_ = np.linalg.lstsq(design.X, design.y, rcond=None)
    residuals = design.y - design.X @ beta
    vectors = np.array([residuals[idx] for idx in design.series])
    T = vectors.shape[1]
    expected = np.zeros((T, T))
    means = vectors.mean(axis=0)
    for i in range(T):
        for j in range(T):
            expected[i, j] = np.sum((vectors[:, i] - means[i]) * (vectors[:, j] - means[j])) / (len(vectors) - 1)
    np.testing.assert_allclose(matrix.cov, expected, atol=1e-12)
    assert matrix.n_series == 72


def test_correlation_properties():
    matrix = empirical_cov_corr(simulated(), ModelSpec())
    np.testing.assert_array_equal(np.diag(matrix.corr), np.ones(4))
    np.testing.assert_array_equal(matrix.corr, matrix.corr.T)
    assert np.all(np.abs(matrix.corr) <= 1 + 1e-12)
    assert np.linalg.eigvalsh(matrix.cov).min() >= -1e-10


def test_shift_invariance():
    data = simulated()
    base = empirical_cov_corr(data, ModelSpec())
    shifted = empirical_cov_corr(with_responses(data, lambda o: o.response + 10.0), ModelSpec())
    np.testing.assert_allclose(shifted.corr, base.corr, atol=1e-9)


def test_insufficient_replicates():
    data = LongDataset.build([obs('s1', 1, 0, 4.0), obs('s1', 1, 1, 4.1), obs('s2', 1, 0, 3.9)])
    spec = ModelSpec(fixed_terms=('intercept',))
    with pytest.raises(InsufficientReplicates):
        empirical_cov_corr(data, spec)


def test_scatter_single_series():
    data = LongDataset.build([obs('s1', 1, t, 4.0 + t) for t in range(3)])
    panels = pairwise_scatter_data(data)
    assert [(p.time_point_a, p.time_point_b) for p in panels] == [(0, 1), (0, 2), (1, 2)]
    assert all(len(p.points) == 1 for p in panels)


def test_scatter_full_layout():
    panels = pairwise_scatter_data(kerr_layout())
    assert len(panels) == 21
    assert all(len(p.points) == 84 for p in panels)
    assert len(scatter_frame(panels)) == 21 * 84


def test_scatter_with_missing_time_point():
    data = LongDataset.build([obs('s1', 1, 0, 4.0), obs('s1', 1, 2, 4.2),
                              obs('s2', 1, 0, 4.1), obs('s2', 1, 1, 4.0), obs('s2', 1, 2, 4.3)])
    counts = {(p.time_point_a, p.time_point_b): len(p.points) for p in pairwise_scatter_data(data)}
    assert counts == {(0, 1): 1, (0, 2): 2, (1, 2): 1}


def test_unbalanced_series_use_complete_vectors():
    complete = {'a': (1.0, 2.0, 0.0), 'b': (-1.0, 0.0, 1.0), 'c': (0.5, -1.0, 2.0)}
    residuals, keys, tps = [], [], []
    for name, values in complete.items():
        residuals += list(values)
        keys += [(name, 1)] * 3
        tps += [0, 1, 2]
    # Partial series pulling pairwise entries in opposite directions
    for name, (tp_a, tp_b), values in (('d', (0, 1), (3.0, 3.0)), ('e', (1, 2), (3.0, 3.0)),
                                       ('f', (0, 2), (3.0, -3.0))):
        residuals += list(values)
        keys += [(name, 1)] * 2
        tps += [tp_a, tp_b]

    matrix = residual_cov_corr(residuals, keys, tps)
    assert matrix.n_series == 3
    np.testing.assert_allclose(matrix.cov, np.cov(np.array(list(complete.values())), rowvar=False), atol=1e-12)
    assert np.all(np.abs(matrix.corr) <= 1 + 1e-12)
    assert np.linalg.eigvalsh(matrix.cov).min() >= -1e-10


def test_no_complete_series_is_insufficient():
    residuals = [1.0, 2.0, 1.5, 2.5, -1.0, 1.0, -2.0, 2.0, 1.0, 3.0, -1.0, -3.0]
    keys = [(name, 1) for name in 'abcdef' for _ in range(2)]
    tps = [0, 1, 0, 1, 1, 2, 1, 2, 0, 2, 0, 2]
    with pytest.raises(InsufficientReplicates):
        residual_cov_corr(residuals, keys, tps)


def test_empty_dataset_is_rejected():
    empty = LongDataset(rows=(), response_name='fev1')
    with pytest.raises(EmptyDataset):
        mean_profiles(empty)
    with pytest.raises(EmptyDataset):
        pairwise_scatter_data(empty)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v']))
