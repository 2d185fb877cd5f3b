"""Tests for CSV ingestion, validation and design encoding."""
import sys
from pathlib import Path

import numpy as np
import pytest

# Add the project root to Python path
project_root = str(Path(__file__).parents[2])
sys.path.insert(0, project_root)
sys.path.insert(0, str(Path(__file__).parent))

from sample_data import DUPLICATE_CSV, HEADER, MINIMAL_CSV, kerr_layout
from src.dataset import (CorrFamily, Grouping, LongDataset, ModelSpec, encode_design, parse_long_csv,
                         parse_model_formula, write_long_csv)
from src.errors import (DuplicateTriple, EmptyDataset, InvalidModelSpec, MissingColumn, NonConstantSmoker,
                        SingleLevelFactor, UnparseableValue)


def test_minimal_csv():
    data = parse_long_csv(MINIMAL_CSV)
    assert data.n == 2
    assert data.subjects == ['s1']
    assert data.time_points == [0, 1]


def test_duplicate_triple_names_the_row():
    with pytest.raises(DuplicateTriple) as excinfo:
        parse_long_csv(DUPLICATE_CSV)
    assert excinfo.value.row == 3
    assert excinfo.value.code == 'dataset.DuplicateTriple'


def test_missing_column():
    text = "subject_id,day,time_point,smoker,fev1\ns1,1,0,0,4.1\n"
    with pytest.raises(MissingColumn) as excinfo:
        parse_long_csv(text)
    assert excinfo.value.column == 'hour_actual'


def test_unparseable_value():
    text = f"{HEADER}\ns1,1,0,0,0,4.1\ns1,1,1,1,0,abc\n"
    with pytest.raises(UnparseableValue) as excinfo:
        parse_long_csv(text)
    assert excinfo.value.row == 3
    assert excinfo.value.column == 'fev1'


def test_smoker_must_be_constant_within_subject():
    text = f"{HEADER}\ns1,1,0,0,0,4.1\ns1,2,0,0,1,4.0\n"
    with pytest.raises(NonConstantSmoker):
        parse_long_csv(text)


def test_columns_in_any_order_and_rows_normalized():
    text = ("fev1,smoker,hour_actual,time_point,day,subject_id\n"
            "4.0,1,1,1,2,s2\n"
            "4.1,0,0,0,1,s10\n"
            "4.2,1,0,0,2,s2\n")
    data = parse_long_csv(text)
    keys = [(obs.subject_id, obs.day, obs.time_point) for obs in data.rows]
    assert keys == [('s2', 2, 0), ('s2', 2, 1), ('s10', 1, 0)]


def test_row_permutation_gives_identical_dataset():
    rows = MINIMAL_CSV.strip().split('\n')
    reversed_text = '\n'.join([rows[0]] + rows[:0:-1]) + '\n'
    assert parse_long_csv(reversed_text) == parse_long_csv(MINIMAL_CSV)


def test_full_layout_row_count():
    assert kerr_layout().n == 588


def test_write_long_csv_is_parseable():
    data = kerr_layout(n_subjects=4, days=(1, 2), time_points=range(3))
    text = write_long_csv(data)
    assert text.split('\n')[0] == HEADER
    assert parse_long_csv(text) == data


def test_full_paper_spec_columns():
    design = encode_design(kerr_layout(), ModelSpec())
    assert design.column_names == ('intercept', 'smoker', 'day2', 'day3', 'hour', 'day2:hour', 'day3:hour')
    assert design.p == 7


def test_reduced_spec_has_four_columns():
    spec = ModelSpec(fixed_terms=('intercept', 'day', 'hour'))
    assert encode_design(kerr_layout(), spec).p == 4


def test_dummy_coding_row():
    data = kerr_layout()
    design = encode_design(data, ModelSpec())
    index = next(i for i, obs in enumerate(data.rows) if obs.smoker and obs.day == 3 and obs.time_point == 4)
    np.testing.assert_array_equal(design.X[index], [1, 1, 0, 1, 4, 0, 4])


def test_interaction_columns_equal_dummy_times_hour():
    design = encode_design(kerr_layout(), ModelSpec())
    X = design.X
    assert set((X[:, 2] + X[:, 3]).tolist()) <= {0.0, 1.0}
    np.testing.assert_array_equal(X[:, 5], X[:, 2] * X[:, 4])
    np.testing.assert_array_equal(X[:, 6], X[:, 3] * X[:, 4])


def test_quadratic_hour_column():
    design = encode_design(kerr_layout(), ModelSpec(poly_degree=2))
    assert design.column_names[-1] == 'hour^2'
    np.testing.assert_array_equal(design.X[:, -1], design.X[:, 4] ** 2)


def test_encode_design_is_deterministic():
    data = kerr_layout()
    first = encode_design(data, ModelSpec())
    second = encode_design(data, ModelSpec())
    assert first.column_names == second.column_names
    np.testing.assert_array_equal(first.X, second.X)


def test_single_level_day_is_rejected():
    data = kerr_layout(days=(2,))
    with pytest.raises(SingleLevelFactor):
        encode_design(data, ModelSpec())


def test_groupings_partition_rows():
    data = kerr_layout(n_subjects=4)
    by_subject = encode_design(data, ModelSpec())
    by_subject_day = encode_design(data, ModelSpec(grouping=Grouping.SUBJECT_DAY))
    assert len(by_subject.groups) == 4
    assert len(by_subject_day.groups) == 12
    assert len(by_subject.series) == 12
    for design in (by_subject, by_subject_day):
        rows = np.sort(np.concatenate(design.groups))
        np.testing.assert_array_equal(rows, np.arange(data.n))


def test_parse_model_formula():
    assert parse_model_formula('day*hour+smoker') == ('intercept', 'smoker', 'day', 'hour', 'day:hour')
    assert parse_model_formula('hour + hour2') == ('intercept', 'hour', 'hour2')
    with pytest.raises(InvalidModelSpec):
        parse_model_formula('smoker*hour')


def test_model_spec_invariants():
    assert ModelSpec(fixed_terms=('smoker',)).fixed_terms == ('intercept', 'smoker')
    with pytest.raises(InvalidModelSpec):
        ModelSpec(fixed_terms=('intercept', 'day', 'day:hour'))
    reduced = ModelSpec().without('day')
    assert reduced.fixed_terms == ('intercept', 'smoker', 'hour')
    assert ModelSpec().with_family('cs').corr_family == CorrFamily.CS


def test_filter_and_strata():
    data = kerr_layout(n_subjects=4)
    filtered = data.filter_time_points([0, 2, 4, 6])
    assert filtered.time_points == [0, 2, 4, 6]
    assert filtered.n == 4 * 3 * 4
    assert data.stratum_levels('smoker') == [False, True]
    assert all(obs.smoker for obs in data.stratum('smoker', True).rows)
    assert data.stratum('day', 2).days == [2]


def test_filter_keeping_nothing():
    with pytest.raises(EmptyDataset):
        kerr_layout(n_subjects=2).filter_time_points([9])


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v']))
