"""Full-scale Monte-Carlo acceptance studies: parameter recovery, covariance-family
selection, whitened-residual ACF calibration and stratified power."""
import argparse
import sys
from pathlib import Path

# Add the project root directory to the Python path
project_root = str(Path(__file__).parent.parent)
sys.path.append(project_root)

from src.config import WORKERS
from src.dataset import CorrFamily
from src.logger import setup_logger
from src.report_generator import ReportGenerator
from src.simul import SimConfig, acf_calibration, power_study, recovery_study

logger = setup_logger('longmix.acceptance')

FIXED_EFFECTS = ('intercept', 'smoker', 'day2', 'day3', 'hour', 'day2:hour', 'day3:hour')


def check_recovery(workers: int) -> dict:
    config = SimConfig(n_subjects=200, n_replicates=500, seed=101)
    report = recovery_study(config, workers)
    checks = {}
    for name in FIXED_EFFECTS:
        summary = report.parameters[name]
        checks[name] = {
            'bias_within_3_mc_se': abs(summary.bias) <= 3.0 * summary.mc_se,
            'coverage_in_range': 0.93 <= summary.coverage <= 0.97,
        }
    passed = all(all(c.values()) for c in checks.values())
    return {'passed': passed, 'checks': checks, 'report': report.to_dict()}


def check_selection(workers: int) -> dict:
    results = {}
    for truth, other, seed in ((CorrFamily.AR1, CorrFamily.CS, 202), (CorrFamily.CS, CorrFamily.AR1, 203)):
        config = SimConfig(n_subjects=100, n_replicates=200, seed=seed, family=truth, rho=0.5)
        report = recovery_study(config, workers)
        counts = report.selection_counts
        results[truth.value] = {
            'passed': counts[truth.value] > counts[other.value],
            'selection_counts': counts,
        }
    return {'passed': all(r['passed'] for r in results.values()), 'truths': results}


def check_acf(workers: int) -> dict:
    result = acf_calibration(SimConfig(n_subjects=200, n_replicates=500, seed=303), max_workers=workers)
    return {'passed': 0.02 <= result.violation_rate <= 0.08, 'result': result.to_dict()}


def check_power(workers: int) -> dict:
    # Smoker hour slope -0.02 against 0.00 for non-smokers
    config = SimConfig(n_subjects=200, n_replicates=200, seed=404,
                       beta={'intercept': 4.2, 'smoker': -0.1, 'day2': -0.03, 'day3': -0.08, 'hour': 0.0},
                       smoker_effects={'hour': -0.02})
    result = power_study(config, stratum='smoker', coefficient='hour', max_workers=workers)
    return {'passed': result.rejection_rate >= 0.8, 'result': result.to_dict()}


CHECKS = {
    'recovery': check_recovery,
    'selection': check_selection,
    'acf': check_acf,
    'power': check_power,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description='Run the Monte-Carlo acceptance studies at full scale')
    parser.add_argument('--out', default='reports/acceptance', help='Output directory')
    parser.add_argument('--workers', type=int, default=WORKERS, help='Thread-pool size')
    parser.add_argument('--only', choices=sorted(CHECKS), action='append', help='Run a subset (repeatable)')
    args = parser.parse_args(argv)

    report = ReportGenerator(args.out)
    results = {}
    for name in args.only or list(CHECKS):
        logger.info(f"Running {name} study...")
        results[name] = CHECKS[name](args.workers)
        logger.info(f"{name}: {'PASS' if results[name]['passed'] else 'FAIL'}")
    report.write_json('acceptance.json', results)
    return 0 if all(r['passed'] for r in results.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
