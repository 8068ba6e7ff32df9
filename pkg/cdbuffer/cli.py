'''Command-line interface: train-source, precompute-stats, adapt, ablate, sweep.'''

import functools
import logging
import multiprocessing
from os.path import join
from typing import Any, Callable, Dict, Optional

import click
import tabulate  # type: ignore

import cdbuffer.util.colors as col
from cdbuffer import errors
from cdbuffer.config import METHODS, ExperimentConfig, method_config
from cdbuffer.corruption import KINDS
from cdbuffer.discrepancy import METRICS, NORMALIZERS
from cdbuffer.experiment import MODEL_FILE, STATS_FILE, Experiment
from cdbuffer.util import add_file_handler, log, write_json

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

# Option name -> config field
_FIELDS = {
    'seed': 'seed',
    'steps': 'steps',
    'eval_every': 'eval_every',
    'lr': 'lr',
    'batch_size': 'batch_size',
    'lambda_reg': 'lambda_reg',
    'rho': 'rho_target',
    'kind': 'corruption_kind',
    'severity': 'corruption_severity',
    'metric': 'metric',
    'norm': 'discrepancy_norm',
    'epochs': 'source_epochs',
    'seeds': 'n_seeds',
    'workers': 'workers',
    'n_train': 'n_train',
    'n_eval': 'n_eval',
    'n_target': 'n_target',
}


def _exit_code(e: BaseException) -> int:
    if isinstance(e, (errors.ConfigError, errors.CorruptionError)):
        return EXIT_CONFIG
    if isinstance(e, errors.NumericalError):
        return EXIT_NUMERICAL
    if isinstance(e, (errors.RecordError, errors.StatsError, errors.DatasetError, OSError)):
        return EXIT_IO
    return 1


def handle_errors(fn: Callable) -> Callable:
    """Map package exceptions onto process exit codes."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (errors.ConfigError, errors.DatasetError, errors.NumericalError,
                errors.RecordError, errors.StatsError, OSError) as e:
            log.error(f'{type(e).__name__}: {e}')
            raise SystemExit(_exit_code(e))
    return wrapper


def build_config(options: Dict[str, Any]) -> ExperimentConfig:
    """Config file (if any) overridden by the options given on the command line."""
    path = options.get('config')
    config = ExperimentConfig.from_json(path) if path else ExperimentConfig()
    overrides = {
        _FIELDS[k]: v for k, v in options.items()
        if k in _FIELDS and v is not None
    }
    if options.get('continual'):
        overrides['continual_severities'] = [
            float(s) for s in options['continual'].split(',') if s.strip()]
    if options.get('light'):
        overrides['stage_enable'] = [True] + [False] * (len(config.widths) - 1)
    for flag in ('mask_loss', 'subtractive', 'additive', 'grad_scaling', 'coupling'):
        if options.get(flag) is not None:
            overrides[f'{flag}_on'] = options[flag]
    if overrides:
        config = config.replace(**overrides)
    method = options.get('method')
    if method:
        config = method_config(config, method)
    return config


def _prepare(options: Dict[str, Any]) -> Experiment:
    if options.get('debug'):
        log.setLevel(logging.DEBUG)
    config = build_config(options)
    experiment = Experiment(config, options['out'])
    add_file_handler(join(options['out'], 'log.txt'))
    write_json(config.get_dict(), experiment.path('config.json'))
    log.debug(f'Resolved configuration:\n{config}')
    return experiment


def common_options(fn: Callable) -> Callable:
    decorators = [
        click.option('--out', default='cdbuffer_out', show_default=True,
                     metavar='DIR', help='Output directory.'),
        click.option('--config', 'config', metavar='FILE',
                     type=click.Path(dir_okay=False),
                     help='JSON configuration to start from.'),
        click.option('--seed', type=int, help='Master seed (default: $CDBUF_SEED or 0).'),
        click.option('--epochs', type=int, help='Source training epochs.'),
        click.option('--n-train', 'n_train', type=int, help='Source training images.'),
        click.option('--n-eval', 'n_eval', type=int, help='Evaluation images.'),
        click.option('--n-target', 'n_target', type=int, help='Target stream images.'),
        click.option('--debug', '-v', is_flag=True, help='Debug logging.'),
    ]
    for d in reversed(decorators):
        fn = d(fn)
    return fn


def adapt_options(fn: Callable) -> Callable:
    decorators = [
        click.option('--steps', type=int, help='Adaptation steps per segment.'),
        click.option('--eval-every', 'eval_every', type=int, help='Evaluation cadence.'),
        click.option('--lr', type=float, help='Adaptation learning rate.'),
        click.option('--batch-size', 'batch_size', type=int, help='Target batch size.'),
        click.option('--lambda-reg', 'lambda_reg', type=float, help='Mask loss weight.'),
        click.option('--rho', type=float, help='Suppression ratio.'),
        click.option('--kind', type=click.Choice(KINDS), help='Corruption kind.'),
        click.option('--severity', type=float, help='Corruption severity in [0, 1].'),
        click.option('--continual', metavar='S1,S2,...',
                     help='Comma-separated severities of continual segments.'),
        click.option('--method', type=click.Choice(METHODS), help='Method preset.'),
        click.option('--metric', type=click.Choice(METRICS), help='Discrepancy metric.'),
        click.option('--norm', type=click.Choice(NORMALIZERS), help='Discrepancy normalizer.'),
        click.option('--light', is_flag=True, help='Buffer the first stage only.'),
        click.option('--mask-loss/--no-mask-loss', 'mask_loss', default=None),
        click.option('--subtractive/--no-subtractive', 'subtractive', default=None),
        click.option('--additive/--no-additive', 'additive', default=None),
        click.option('--grad-scaling/--no-grad-scaling', 'grad_scaling', default=None),
        click.option('--coupling/--no-coupling', 'coupling', default=None),
        click.option('--seeds', type=int, help='Seeds for ablate and sweep.'),
        click.option('--workers', type=int, help='Worker processes for ablate and sweep.'),
    ]
    for d in reversed(decorators):
        fn = d(fn)
    return fn


def _print_table(df) -> None:
    click.echo(tabulate.tabulate(df, headers='keys', showindex=False, floatfmt='.4f'))


@click.group()
def main():
    '''Test-time adaptation with subtractive and additive channel buffers.'''


@main.command('train-source')
@common_options
@handle_errors
def train_source_cmd(**options):
    '''Train the source network and precompute its statistics.'''
    experiment = _prepare(options)
    experiment.train_source()
    click.echo(f'Wrote {col.green(experiment.path(MODEL_FILE))} and '
               f'{col.green(experiment.path(STATS_FILE))}')


@main.command('precompute-stats')
@common_options
@click.option('--model', required=True, metavar='FILE', help='Model checkpoint.')
@handle_errors
def precompute_stats_cmd(model: str, **options):
    '''Recompute source statistics for an existing model.'''
    experiment = _prepare(options)
    experiment.precompute_stats(model)
    click.echo(f'Wrote {col.green(experiment.path(STATS_FILE))}')


@main.command('adapt')
@common_options
@adapt_options
@click.option('--model', required=True, metavar='FILE', help='Model checkpoint.')
@click.option('--stats', required=True, metavar='FILE', help='Source statistics.')
@handle_errors
def adapt_cmd(model: str, stats: str, **options):
    '''Adapt a source model to a corrupted target stream.'''
    experiment = _prepare(options)
    report = experiment.adapt(model, stats)
    summary = report['summary']
    click.echo(tabulate.tabulate(
        [[summary['direct_accuracy'], summary['final_accuracy'], summary['best_accuracy']]],
        headers=['direct', 'final', 'best'], floatfmt='.4f'))


@main.command('ablate')
@common_options
@adapt_options
@click.option('--model', metavar='FILE', help='Model checkpoint (first seed).')
@click.option('--stats', metavar='FILE', help='Source statistics (first seed).')
@handle_errors
def ablate_cmd(model: Optional[str], stats: Optional[str], **options):
    '''Run every component-switch combination.'''
    experiment = _prepare(options)
    _print_table(experiment.ablate(model, stats)[
        ['row', 'seed', 'direct_accuracy', 'final_accuracy']])


@main.command('sweep')
@common_options
@adapt_options
@click.option('--model', metavar='FILE', help='Model checkpoint (first seed).')
@click.option('--stats', metavar='FILE', help='Source statistics (first seed).')
@handle_errors
def sweep_cmd(model: Optional[str], stats: Optional[str], **options):
    '''Run every method on every (kind, severity) cell.'''
    experiment = _prepare(options)
    _print_table(experiment.sweep(model, stats)[
        ['kind', 'severity', 'method', 'seed', 'final_accuracy']])


def run() -> None:
    multiprocessing.freeze_support()
    main()  # pylint: disable=no-value-for-parameter
