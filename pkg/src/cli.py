"""Command-line pipeline: explore, fit, stratify, diagnose, compare, simulate, study.

Reports are written to files under --out; standard error carries log lines only.
Exit codes: 0 success, 2 validation error, 3 convergence failure.
"""
import argparse
import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

from .classical import factorial_anova, kerr_paired_tests
from .config import DEFAULT_OUTPUT_DIR, load_run_config
from .dataset import CorrFamily, LongDataset, Method, ModelSpec, parse_model_formula, read_long_csv, write_long_csv
from .diagnostics import build_report
from .errors import VALIDATION_EXIT, IncomparableModels, InvalidConfig, LongmixError
from .explore import empirical_cov_corr, mean_profiles, pairwise_scatter_data, scatter_frame
from .lmm import FittedModel, compare_by_aic, fit, select_covariance, stratified_fit
from .logger import setup_logger
from .report_generator import ReportGenerator, RunManifest, utc_now
from .simul import SimConfig, acf_calibration, power_study, recovery_study, simulate

logger = logging.getLogger(__name__)

COMMANDS = ('explore', 'fit', 'stratify', 'diagnose', 'compare', 'simulate', 'study')

DEFAULTS = {
    'input': None,
    'out': DEFAULT_OUTPUT_DIR,
    'fixed': [],
    'poly': 1,
    'grouping': 'subject',
    'corr': None,
    'method': 'reml',
    'level': 0.95,
    'stratify': 'smoker',
    'filter_timepoints': None,
    'seed': None,
    'pair': [],
    'max_lag': 6,
    'replicates': None,
    'workers': None,
    'log_level': None,
    'power': False,
    'acf_calibration': False,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--input', help='Long-format CSV (subject_id,day,time_point,hour_actual,smoker,fev1)')
    common.add_argument('--out', help=f'Output directory (default {DEFAULT_OUTPUT_DIR})')
    common.add_argument('--config', help='JSON or TOML run configuration; flags override it')
    common.add_argument('--fixed', action='append', help='Fixed-effects formula, e.g. day*hour+smoker (repeatable)')
    common.add_argument('--poly', type=int, choices=(1, 2), help='Polynomial degree in hour')
    common.add_argument('--grouping', choices=('subject', 'subject-day'), help='Random-intercept grouping')
    common.add_argument('--corr', choices=('ar1', 'cs', 'independent'),
                        help='Residual correlation; omitted means AR1 and CS compared by AIC')
    common.add_argument('--method', choices=('reml', 'ml'), help='Estimation method')
    common.add_argument('--level', type=float, help='Confidence level for Wald intervals')
    common.add_argument('--stratify', choices=('smoker', 'day'), help='Covariate to stratify by')
    common.add_argument('--filter-timepoints', help='Comma-separated time-point indices to keep, e.g. 0,2,4,6')
    common.add_argument('--seed', type=int, help='Simulation seed')
    common.add_argument('--pair', action='append', help='Paired t-test contrast DAY:TP,DAY:TP (repeatable)')
    common.add_argument('--max-lag', type=int, help='Largest ACF lag (default 6)')
    common.add_argument('--replicates', type=int, help='Monte-Carlo replicates for study')
    common.add_argument('--workers', type=int, help='Thread-pool size for study replicates')
    common.add_argument('--power', action='store_true', default=None,
                        help='study: also run the stratified power study')
    common.add_argument('--acf-calibration', action='store_true', default=None,
                        help='study: also run the whitened-residual ACF calibration')
    common.add_argument('--log-level', help='DEBUG, INFO, WARNING or ERROR')

    parser = argparse.ArgumentParser(prog='longmix', description='Longitudinal mixed-model analysis pipeline')
    subparsers = parser.add_subparsers(dest='command', required=True)
    for command in COMMANDS:
        subparsers.add_parser(command, parents=[common])
    return parser


def resolve_settings(args: argparse.Namespace) -> Tuple[Dict, Dict]:
    """Defaults, then the config file, then command-line flags; returns (settings, raw config)"""
    file_config = load_run_config(args.config)
    settings = dict(DEFAULTS)
    settings.update({k: v for k, v in file_config.items() if k in DEFAULTS})
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    if isinstance(settings['fixed'], str):
        settings['fixed'] = [settings['fixed']]
    if isinstance(settings['pair'], str):
        settings['pair'] = [settings['pair']]

    try:
        settings['level'] = float(settings['level'])
    except (TypeError, ValueError):
        raise InvalidConfig(f"--level must be a number, got '{settings['level']}'")
    if not 0.0 < settings['level'] < 1.0:
        raise InvalidConfig(f"--level must lie in (0, 1), got {settings['level']}")
    if int(settings['max_lag']) < 0:
        raise InvalidConfig(f"--max-lag must be non-negative, got {settings['max_lag']}")
    return settings, file_config


def parse_time_points(value) -> Optional[List[int]]:
    if value is None:
        return None
    items = value.split(',') if isinstance(value, str) else value
    try:
        return [int(str(item).strip()) for item in items if str(item).strip()]
    except ValueError:
        raise InvalidConfig(f"--filter-timepoints must be comma-separated integers, got '{value}'")


def parse_pair(text: str) -> Tuple[Tuple[int, int], Tuple[int, int]]:
    """'2:0,1:0' -> ((2, 0), (1, 0))"""
    try:
        first, second = text.split(',')
        a_day, a_tp = first.split(':')
        b_day, b_tp = second.split(':')
        return (int(a_day), int(a_tp)), (int(b_day), int(b_tp))
    except ValueError:
        raise InvalidConfig(f"--pair must look like DAY:TP,DAY:TP, got '{text}'")


def build_specs(settings: Dict) -> List[ModelSpec]:
    family = settings['corr'] or CorrFamily.AR1
    formulas = settings['fixed'] or [None]
    specs = []
    for formula in formulas:
        kwargs = dict(grouping=settings['grouping'], corr_family=family, method=settings['method'],
                      poly_degree=int(settings['poly']))
        if formula:
            kwargs['fixed_terms'] = parse_model_formula(formula)
        specs.append(ModelSpec(**kwargs))
    return specs


def load_data(settings: Dict) -> LongDataset:
    if not settings['input']:
        raise InvalidConfig("--input is required for this subcommand")
    data = read_long_csv(settings['input'])
    keep = parse_time_points(settings['filter_timepoints'])
    if keep is not None:
        data = data.filter_time_points(keep)
    return data


def fit_models(data: LongDataset, settings: Dict) -> Tuple[FittedModel, Dict]:
    """
    Fit every requested mean model and keep the AIC winner
    Args:
        data: Dataset to fit
        settings: Resolved settings
    Returns:
        (winning fit, selection document)
    """
    specs = build_specs(settings)
    if len(specs) > 1 and specs[0].method == Method.REML:
        raise IncomparableModels(
            "REML log-likelihoods are not comparable across different fixed-effect specifications; "
            "use --method ml to compare mean models")

    candidates: List[FittedModel] = []
    covariance_tables = []
    for spec in specs:
        if settings['corr']:
            candidates.append(fit(data, spec))
        else:
            selection = select_covariance(data, spec)
            candidates.append(selection.best)
            covariance_tables.append({'formula': spec.formula, 'candidates': selection.table,
                                      'failures': selection.failures})

    document: Dict = {'covariance_selection': covariance_tables}
    if len(candidates) > 1:
        labels = [f"{c.spec.corr_family.value}: {c.spec.formula}" for c in candidates]
        table = compare_by_aic(candidates, labels)
        document['mean_model_comparison'] = table
        best = candidates[labels.index(table[0]['label'])]
    else:
        best = candidates[0]
    return best, document


def fit_document(best: FittedModel, selection: Dict, level: float) -> Dict:
    document = best.to_dict(level)
    document['selection'] = selection
    return document


def cmd_explore(data: LongDataset, settings: Dict, report: ReportGenerator) -> None:
    spec = build_specs(settings)[0]
    profiles = mean_profiles(data)
    document = {'n_rows': data.n, 'n_subjects': len(data.subjects), 'days': data.days,
                'time_points': data.time_points, 'mean_profiles': profiles.to_list()}
    try:
        cov_corr = empirical_cov_corr(data, spec)
        document['cov_corr'] = cov_corr.to_dict()
        report.write_csv('cov_corr.csv', cov_corr.presentation_frame().reset_index(names='time_point'))
    except LongmixError as e:
        logger.warning(f"Empirical covariance unavailable: {e.code}: {e}")
        document['cov_corr'] = {'error': e.code, 'message': str(e)}
    report.write_csv('mean_profiles.csv', profiles.to_frame())
    report.write_csv('scatter.csv', scatter_frame(pairwise_scatter_data(data)))
    report.write_json('explore.json', document)


def cmd_fit(data: LongDataset, settings: Dict, report: ReportGenerator) -> None:
    best, selection = fit_models(data, settings)
    report.write_json('fit.json', fit_document(best, selection, settings['level']))


def cmd_stratify(data: LongDataset, settings: Dict, report: ReportGenerator) -> None:
    spec = build_specs(settings)[0]
    result = stratified_fit(data, spec, settings['stratify'])
    report.write_json('stratify.json', result.to_dict(settings['level']))


def cmd_diagnose(data: LongDataset, settings: Dict, report: ReportGenerator) -> None:
    best, selection = fit_models(data, settings)
    diagnostics = build_report(best, data, int(settings['max_lag']))
    report.write_json('fit.json', fit_document(best, selection, settings['level']))
    for name, frame in diagnostics.frames().items():
        report.write_csv(os.path.join('diagnostics', name), frame)
    report.write_json('diagnostics.json', diagnostics.to_dict())


def cmd_compare(data: LongDataset, settings: Dict, report: ReportGenerator) -> None:
    best, selection = fit_models(data, settings)
    pairs = [parse_pair(p) for p in settings['pair']] or None
    paired = kerr_paired_tests(data, pairs, settings['level'])
    try:
        anova = factorial_anova(data).to_dict()
    except LongmixError as e:
        logger.warning(f"ANOVA unavailable: {e.code}: {e}")
        anova = {'error': e.code, 'message': str(e)}
    report.write_json('compare.json', {
        'lmm': fit_document(best, selection, settings['level']),
        'paired_t': [contrast.to_dict() for contrast in paired],
        'anova': anova,
    })


def sim_config(settings: Dict, file_config: Dict) -> SimConfig:
    values = file_config.get('simulation')
    if values is None:
        values = {k: v for k, v in file_config.items() if k in SimConfig.__dataclass_fields__}
    values = dict(values)
    if settings['seed'] is not None:
        values['seed'] = settings['seed']
    if settings['replicates'] is not None:
        values['n_replicates'] = settings['replicates']
    return SimConfig.from_dict(values)


def cmd_simulate(config: SimConfig, settings: Dict, report: ReportGenerator) -> None:
    data = simulate(config)
    report.write_text('simulated.csv', write_long_csv(data))


def cmd_study(config: SimConfig, settings: Dict, report: ReportGenerator) -> None:
    workers = settings['workers']
    document = {'recovery': recovery_study(config, workers).to_dict()}
    if settings['power']:
        document['power'] = power_study(config, settings['stratify'], max_workers=workers).to_dict()
    if settings['acf_calibration']:
        document['acf_calibration'] = acf_calibration(config, max_workers=workers).to_dict()
    report.write_json('study.json', document)


DATA_COMMANDS = {
    'explore': cmd_explore,
    'fit': cmd_fit,
    'stratify': cmd_stratify,
    'diagnose': cmd_diagnose,
    'compare': cmd_compare,
}

SIM_COMMANDS = {
    'simulate': cmd_simulate,
    'study': cmd_study,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one subcommand
    Args:
        argv: Command-line arguments without the program name
    Returns:
        Process exit code
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    started_at = utc_now()
    setup_logger(level=getattr(args, 'log_level', None))
    try:
        settings, file_config = resolve_settings(args)
        if settings['log_level']:
            setup_logger(level=settings['log_level'])
        report = ReportGenerator(settings['out'])
        manifest = RunManifest(subcommand=args.command, inputs=[], resolved={}, started_at=started_at)
        if args.config:
            manifest.inputs.append(args.config)

        if args.command in DATA_COMMANDS:
            data = load_data(settings)
            manifest.inputs.append(settings['input'])
            manifest.resolved = {'specs': [spec.to_dict() for spec in build_specs(settings)],
                                 'settings': settings}
            DATA_COMMANDS[args.command](data, settings, report)
        else:
            config = sim_config(settings, file_config)
            manifest.seed = config.seed
            manifest.resolved = {'simulation': config.to_dict(), 'settings': settings}
            SIM_COMMANDS[args.command](config, settings, report)

        report.write_manifest(manifest)
    except LongmixError as e:
        logger.error(f"{e.code}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"io.{type(e).__name__}: {e}")
        return VALIDATION_EXIT

    logger.info(f"{args.command} finished")
    return 0
