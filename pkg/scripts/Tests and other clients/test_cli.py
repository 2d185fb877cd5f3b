"""End-to-end tests for the command-line pipeline."""
import json
import sys
from pathlib import Path

import pytest

# Add the project root to Python path
project_root = str(Path(__file__).parents[2])
sys.path.insert(0, project_root)
sys.path.insert(0, str(Path(__file__).parent))

from sample_data import simulated, single_point_series, write_csv
from src.cli import parse_pair, run

SIM_TOML = """[simulation]
n_subjects = 16
time_points = [0, 1, 2, 3]
sigma_b2 = 0.04
sigma_e2 = 0.01
rho = 0.5
seed = 2024
n_replicates = 2
"""


@pytest.fixture()
def sample_csv(tmp_path):
    return write_csv(tmp_path / 'sample.csv', simulated())


def read_json(path: Path):
    return json.loads(path.read_text())


def test_fit_writes_versioned_report(sample_csv, tmp_path):
    out = tmp_path / 'fit'
    assert run(['fit', '--input', sample_csv, '--out', str(out), '--corr', 'ar1']) == 0
    report = read_json(out / 'fit.json')
    assert report['schema'] == 'longmix-fit/1'
    assert [c['name'] for c in report['coefficients']][:2] == ['intercept', 'smoker']
    manifest = read_json(out / 'manifest.json')
    assert manifest['subcommand'] == 'fit'
    assert manifest['outputs'] == ['fit.json']


def test_fit_without_corr_compares_families(sample_csv, tmp_path):
    out = tmp_path / 'select'
    assert run(['fit', '--input', sample_csv, '--out', str(out)]) == 0
    selection = read_json(out / 'fit.json')['selection']['covariance_selection'][0]
    assert {row['label'] for row in selection['candidates']} == {'ar1', 'cs'}


def test_reports_are_byte_identical(sample_csv, tmp_path):
    for name in ('a', 'b'):
        assert run(['compare', '--input', sample_csv, '--out', str(tmp_path / name), '--corr', 'ar1']) == 0
    assert (tmp_path / 'a' / 'compare.json').read_bytes() == (tmp_path / 'b' / 'compare.json').read_bytes()


def test_single_point_series_exit_code(tmp_path):
    path = write_csv(tmp_path / 'single.csv', single_point_series())
    assert run(['fit', '--input', path, '--out', str(tmp_path / 'out'), '--corr', 'ar1']) == 3


def test_reml_comparison_across_mean_models_is_refused(sample_csv, tmp_path):
    argv = ['fit', '--input', sample_csv, '--out', str(tmp_path / 'out'), '--corr', 'ar1',
            '--fixed', 'day*hour+smoker', '--fixed', 'day+hour']
    assert run(argv) == 2
    assert run(argv + ['--method', 'ml']) == 0
    report = read_json(tmp_path / 'out' / 'fit.json')
    assert len(report['selection']['mean_model_comparison']) == 2


def test_invalid_input_exit_code(tmp_path):
    path = tmp_path / 'bad.csv'
    path.write_text('subject_id,day,time_point\ns1,1,0\n')
    assert run(['fit', '--input', str(path), '--out', str(tmp_path / 'out')]) == 2
    assert run(['fit', '--input', str(tmp_path / 'missing.csv'), '--out', str(tmp_path / 'out')]) == 2
    assert run(['fit', '--corr', 'banana']) == 2


def test_compare_report_sections(sample_csv, tmp_path):
    out = tmp_path / 'compare'
    assert run(['compare', '--input', sample_csv, '--out', str(out), '--corr', 'ar1', '--pair', '2:3,1:3']) == 0
    report = read_json(out / 'compare.json')
    assert set(report) == {'lmm', 'paired_t', 'anova'}
    assert report['paired_t'][0]['label'] == 'day2@tp3 - day1@tp3'
    assert set(report['anova']['rows']) == {'day', 'hour', 'day:hour', 'error'}


def test_diagnose_writes_plot_data(sample_csv, tmp_path):
    out = tmp_path / 'diag'
    assert run(['diagnose', '--input', sample_csv, '--out', str(out), '--corr', 'ar1', '--max-lag', '2']) == 0
    assert (out / 'diagnostics' / 'acf.csv').exists()
    manifest = read_json(out / 'manifest.json')
    assert 'diagnostics/variogram.csv' in [p.replace('\\', '/') for p in manifest['outputs']]
    assert len(read_json(out / 'diagnostics.json')['acf']) == 3


def test_explore_and_filter(sample_csv, tmp_path):
    out = tmp_path / 'explore'
    assert run(['explore', '--input', sample_csv, '--out', str(out), '--filter-timepoints', '0,2']) == 0
    report = read_json(out / 'explore.json')
    assert report['time_points'] == [0, 2]
    assert report['cov_corr']['time_points'] == [0, 2]
    assert (out / 'scatter.csv').exists()


def test_stratify(sample_csv, tmp_path):
    out = tmp_path / 'strata'
    assert run(['stratify', '--input', sample_csv, '--out', str(out), '--corr', 'ar1']) == 0
    report = read_json(out / 'stratify.json')
    assert set(report['fits']) == {'nonsmoker', 'smoker'}


def test_simulate_and_study_from_config(tmp_path):
    config = tmp_path / 'sim.toml'
    config.write_text(SIM_TOML)
    out = tmp_path / 'sim'
    assert run(['simulate', '--config', str(config), '--out', str(out)]) == 0
    lines = (out / 'simulated.csv').read_text().strip().split('\n')
    assert lines[0] == 'subject_id,day,time_point,hour_actual,smoker,fev1'
    assert len(lines) == 1 + 16 * 3 * 4
    assert read_json(out / 'manifest.json')['seed'] == 2024

    study_out = tmp_path / 'study'
    assert run(['study', '--config', str(config), '--out', str(study_out), '--workers', '2']) == 0
    assert read_json(study_out / 'study.json')['recovery']['n_replicates'] == 2


def test_parse_pair():
    assert parse_pair('2:0,1:0') == ((2, 0), (1, 0))


def test_pipeline_reports_are_byte_identical(tmp_path):
    config = tmp_path / 'sim.toml'
    config.write_text(SIM_TOML)
    for name in ('a', 'b'):
        root = tmp_path / name
        assert run(['simulate', '--config', str(config), '--out', str(root / 'simulate')]) == 0
        csv = str(root / 'simulate' / 'simulated.csv')
        for command in ('fit', 'diagnose', 'compare'):
            assert run([command, '--input', csv, '--out', str(root / command), '--corr', 'ar1']) == 0

    reports = sorted(p.relative_to(tmp_path / 'a') for p in (tmp_path / 'a').rglob('*')
                     if p.is_file() and p.name != 'manifest.json')
    assert {p.parts[0] for p in reports} == {'simulate', 'fit', 'diagnose', 'compare'}
    assert sum(1 for p in reports if p.suffix == '.json') == 4
    for path in reports:
        assert (tmp_path / 'a' / path).read_bytes() == (tmp_path / 'b' / path).read_bytes(), str(path)


def test_invalid_level_exit_code(sample_csv, tmp_path):
    out = tmp_path / 'out'
    assert run(['fit', '--input', sample_csv, '--out', str(out), '--corr', 'ar1', '--level', '1.5']) == 2
    assert not (out / 'fit.json').exists()


def test_filter_keeping_nothing_exit_code(sample_csv, tmp_path):
    assert run(['explore', '--input', sample_csv, '--out', str(tmp_path / 'out'), '--filter-timepoints', '9']) == 2


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v']))
