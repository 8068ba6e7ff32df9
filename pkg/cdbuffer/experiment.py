"""Orchestration behind the command-line verbs.

An :class:`Experiment` owns one configuration and one output directory.
Every artifact it writes is a deterministic function of the
configuration, the input files and the seeds; wall-clock timings go to a
separate ``timing.json``.
"""

import csv
import multiprocessing as mp
import time
from collections import Counter, OrderedDict
from os.path import exists, join
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

import cdbuffer.util.colors as col
from cdbuffer import discrepancy
from cdbuffer.adapt import (CSV_COLUMNS, AdaptState, StepReport, adapt_continual,
                            batch_stream)
from cdbuffer.config import METHODS, ExperimentConfig, ablation_configs, method_config
from cdbuffer.corruption import CorruptionSpec, corrupt_dataset
from cdbuffer.dataset import ToyDataset, gen_dataset
from cdbuffer.model import ToyNet, accuracy, train_source
from cdbuffer.stats import SourceStats, precompute_stats
from cdbuffer.tensor import Tensor, no_grad
from cdbuffer.util import (Path, log, make_dir, progress_disabled, rng as make_rng,
                           write_json)

REPORT_SCHEMA = 'cdbuffer-report-1'
MODEL_FILE = 'model.cdckpt'
STATS_FILE = 'source.cdstats'

STREAM_DATA = 29
ROLE_TRAIN, ROLE_EVAL, ROLE_TARGET = 0, 1, 2


def data_seed(seed: int, role: int) -> int:
    """Generator seed of one dataset role (train / eval / target)."""
    return int(make_rng(seed, STREAM_DATA, role).integers(2 ** 31 - 1))


def source_datasets(config: ExperimentConfig, seed: int) -> Tuple[ToyDataset, ToyDataset]:
    """Clean training set and clean held-out set."""
    return (gen_dataset(config.n_train, data_seed(seed, ROLE_TRAIN)),
            gen_dataset(config.n_eval, data_seed(seed, ROLE_EVAL)))


def build_source(config: ExperimentConfig, seed: int) -> Tuple[ToyNet, SourceStats, Dict[str, Any]]:
    """Train the source network for ``seed`` and precompute its statistics."""
    train, val = source_datasets(config, seed)
    net = ToyNet(config.widths, config.blocks_per_stage, seed=seed,
                 bn_eps=config.bn_eps, bn_momentum=config.bn_momentum)
    log.info(f'Training source network ({col.bold(str(config.source_epochs))} '
             f'epochs, seed {seed})')
    train_source(net, train, config.source_epochs, config.source_lr, seed,
                 batch_size=config.source_batch_size)
    clean_acc = accuracy(net, val)
    log.info(f'Clean held-out accuracy: {col.green(f"{clean_acc:.4f}")}')
    stats = precompute_stats(net, train, instance_size=config.instance_size)
    return net, stats, {'clean_accuracy': clean_acc, 'seed': seed}


def source_discrepancy(
    net: ToyNet,
    dataset: ToyDataset,
    stats: SourceStats,
    config: ExperimentConfig,
    batch_size: Optional[int] = None
) -> float:
    """Mean network discrepancy of the unbuffered net over ``dataset``."""
    batch_size = batch_size or config.batch_size
    values = []
    with no_grad():
        for idx in dataset.batches(batch_size):
            _, taps = net.forward_with_taps(Tensor(dataset.pixels(idx)))
            score = discrepancy.score(taps, dataset.boxes(idx), stats,
                                      config.metric, config.discrepancy_norm)
            values.append(score.mean())
    return float(np.mean(values))


def run_adaptation(
    net: ToyNet,
    stats: SourceStats,
    config: ExperimentConfig,
    seed: Optional[int] = None
) -> Tuple[Dict[str, Any], List[StepReport]]:
    """Adapt a copy of ``net`` over every target segment of ``config``.

    Returns:
        Tuple of the run report (JSON-ready dict) and the step reports.
    """
    seed = config.seed if seed is None else seed
    eval_clean = gen_dataset(config.n_eval, data_seed(seed, ROLE_EVAL))
    target_clean = gen_dataset(config.n_target, data_seed(seed, ROLE_TARGET))
    segments = []
    summary_segments = []
    for i, severity in enumerate(config.segments):
        spec = CorruptionSpec(config.corruption_kind, float(severity), seed)
        target = corrupt_dataset(target_clean, spec)
        eval_set = corrupt_dataset(eval_clean, spec._replace(seed=seed + 1))
        direct = accuracy(net, eval_set)
        summary_segments.append(OrderedDict([
            ('segment', i),
            ('severity', float(severity)),
            ('direct_accuracy', direct),
            ('source_discrepancy', source_discrepancy(net, target, stats, config)),
        ]))
        segments.append((float(severity),
                         batch_stream(target, config.batch_size, config.steps, seed, key=i),
                         eval_set))

    state = AdaptState.create(net, config, seed)
    reports = []  # type: List[StepReport]
    if config.steps and config.method != 'direct':
        reports = adapt_continual(state, segments, stats, config.eval_every,
                                  steps_per_segment=config.steps)

    for seg in summary_segments:
        seg_reports = [r for r in reports if r.segment == seg['segment']]
        evals = [r.accuracy for r in seg_reports if r.accuracy is not None]
        seg['final_accuracy'] = evals[-1] if evals else seg['direct_accuracy']
        seg['best_accuracy'] = max(evals) if evals else seg['direct_accuracy']
        seg['adapted_discrepancy'] = (
            float(np.mean([np.mean(list(r.layer_discrepancy.values()))
                           for r in seg_reports])) if seg_reports else None)

    histogram = Counter(r.suppressed for r in reports)
    last = summary_segments[-1]
    report = OrderedDict([
        ('schema', REPORT_SCHEMA),
        ('config', config.get_dict()),
        ('config_hash', config.hash()),
        ('seed', seed),
        ('network_hash', net.hash()),
        ('stats', stats.meta),
        ('steps', [r.to_dict() for r in reports]),
        ('evaluations', [
            {'step': r.step, 'segment': r.segment, 'accuracy': r.accuracy}
            for r in reports if r.accuracy is not None]),
        ('summary', OrderedDict([
            ('direct_accuracy', summary_segments[0]['direct_accuracy']),
            ('final_accuracy', last['final_accuracy']),
            ('best_accuracy', max(s['best_accuracy'] for s in summary_segments)),
            ('segments', summary_segments),
            ('suppressed_histogram', {str(k): histogram[k] for k in sorted(histogram)}),
        ])),
    ])
    return report, reports


def write_steps_csv(reports: Sequence[StepReport], path: Path) -> None:
    with open(path, 'w', newline='') as outfile:
        writer = csv.DictWriter(outfile, fieldnames=list(CSV_COLUMNS))
        writer.writeheader()
        for r in reports:
            writer.writerow(r.csv_row())


def _run_cell(task: Tuple) -> Dict[str, Any]:
    """Worker entry point: one (config, seed) adaptation run, summarized."""
    key, config_dict, net, stats, seed = task
    config = ExperimentConfig.from_dict(config_dict)
    report, _ = run_adaptation(net, stats, config, seed)
    row = OrderedDict(key)
    row.update([
        ('method', config.method),
        ('config_hash', config.hash()),
        ('seed', seed),
        ('direct_accuracy', report['summary']['direct_accuracy']),
        ('final_accuracy', report['summary']['final_accuracy']),
        ('best_accuracy', report['summary']['best_accuracy']),
        ('source_discrepancy', report['summary']['segments'][0]['source_discrepancy']),
    ])
    return row


class Experiment:
    """Runs the command-line verbs for one configuration.

    Args:
        config (ExperimentConfig): Hyperparameters.
        outdir (str): Directory for every artifact. Created if missing.
    """

    def __init__(self, config: ExperimentConfig, outdir: Path) -> None:
        self.config = config
        self.outdir = outdir
        make_dir(outdir)
        self._timing = OrderedDict()  # type: OrderedDict[str, float]
        self._sources = {}  # type: Dict[int, Tuple[ToyNet, SourceStats]]

    def __repr__(self) -> str:
        return f'Experiment(outdir={self.outdir!r}, method={self.config.method!r})'

    def path(self, name: str) -> str:
        return join(self.outdir, name)

    def _timed(self, label: str, start: float) -> None:
        self._timing[label] = time.perf_counter() - start
        write_json(self._timing, self.path('timing.json'))

    @property
    def seeds(self) -> List[int]:
        return [self.config.seed + i for i in range(self.config.n_seeds)]

    # --- Source -------------------------------------------------------------
    def train_source(self) -> Tuple[ToyNet, SourceStats]:
        """Train the source network and write model + statistics files."""
        start = time.perf_counter()
        net, stats, info = build_source(self.config, self.config.seed)
        net.save(self.path(MODEL_FILE), meta={'clean_accuracy': info['clean_accuracy'],
                                              'seed': self.config.seed})
        stats.save(self.path(STATS_FILE))
        self._timed('train_source', start)
        return net, stats

    def precompute_stats(self, model_path: Path) -> SourceStats:
        """Recompute source statistics for an existing model file."""
        start = time.perf_counter()
        net = ToyNet.load(model_path)
        train, _ = source_datasets(self.config, self.config.seed)
        stats = precompute_stats(net, train, instance_size=self.config.instance_size)
        stats.save(self.path(STATS_FILE))
        self._timed('precompute_stats', start)
        return stats

    def _load_source(self, model_path: Path, stats_path: Path) -> Tuple[ToyNet, SourceStats]:
        for p in (model_path, stats_path):
            if not exists(p):
                raise OSError(f'File not found: {p}')
        net = ToyNet.load(model_path)
        stats = SourceStats.load(stats_path)
        stats.check_compatible(net)
        return net, stats

    def _source_for(
        self,
        seed: int,
        model_path: Optional[Path] = None,
        stats_path: Optional[Path] = None
    ) -> Tuple[ToyNet, SourceStats]:
        if seed not in self._sources:
            if model_path and stats_path and seed == self.config.seed:
                self._sources[seed] = self._load_source(model_path, stats_path)
            else:
                net, stats, _ = build_source(self.config, seed)
                self._sources[seed] = (net, stats)
        return self._sources[seed]

    # --- Adaptation ---------------------------------------------------------
    def adapt(self, model_path: Path, stats_path: Path) -> Dict[str, Any]:
        """Adapt the model and write report.json, steps.csv and timing.json."""
        start = time.perf_counter()
        net, stats = self._load_source(model_path, stats_path)
        report, reports = run_adaptation(net, stats, self.config)
        write_json(report, self.path('report.json'))
        write_steps_csv(reports, self.path('steps.csv'))
        self._timed('adapt', start)
        s = report['summary']
        log.info(f"{col.bold(self.config.method)}: direct "
                 f"{s['direct_accuracy']:.4f} -> final {s['final_accuracy']:.4f} "
                 f"(best {s['best_accuracy']:.4f})")
        return report

    def _run_tasks(self, tasks: List[Tuple], desc: str) -> List[Dict[str, Any]]:
        rows = []
        pb = tqdm(total=len(tasks), desc=desc, unit='run', leave=False,
                  disable=progress_disabled())
        if self.config.workers > 1 and len(tasks) > 1:
            ctx = mp.get_context('spawn')
            with ctx.Pool(self.config.workers) as pool:
                for row in pool.imap(_run_cell, tasks):
                    rows.append(row)
                    pb.update(1)
        else:
            for task in tasks:
                rows.append(_run_cell(task))
                pb.update(1)
        pb.close()
        return rows

    def ablate(
        self,
        model_path: Optional[Path] = None,
        stats_path: Optional[Path] = None
    ) -> pd.DataFrame:
        """Every ablation row for every seed; writes ablation.csv."""
        start = time.perf_counter()
        rows = ablation_configs(self.config)
        tasks = []
        for seed in self.seeds:
            net, stats = self._source_for(seed, model_path, stats_path)
            for name, cfg in rows.items():
                tasks.append(((('row', name),), cfg.get_dict(), net, stats, seed))
        df = pd.DataFrame(self._run_tasks(tasks, 'Ablation'))
        order = {name: i for i, name in enumerate(rows)}
        df = (df.assign(_order=df['row'].map(order))
                .sort_values(['_order', 'seed'], kind='mergesort')
                .drop(columns='_order')
                .reset_index(drop=True))
        df.to_csv(self.path('ablation.csv'), index=False, float_format='%.6f')
        self._timed('ablate', start)
        return df

    def sweep(
        self,
        model_path: Optional[Path] = None,
        stats_path: Optional[Path] = None
    ) -> pd.DataFrame:
        """(kind, severity) x method x seed grid; writes sweep.csv and
        sweep_summary.csv (one accuracy column per seed)."""
        start = time.perf_counter()
        tasks = []
        for seed in self.seeds:
            net, stats = self._source_for(seed, model_path, stats_path)
            for kind in self.config.sweep_kinds:
                for severity in self.config.sweep_severities:
                    cell = self.config.replace(corruption_kind=kind,
                                               corruption_severity=float(severity),
                                               continual_severities=[])
                    for method in METHODS:
                        cfg = method_config(cell, method)
                        key = (('kind', kind), ('severity', float(severity)))
                        tasks.append((key, cfg.get_dict(), net, stats, seed))
        df = pd.DataFrame(self._run_tasks(tasks, 'Sweep'))
        method_order = {m: i for i, m in enumerate(METHODS)}
        df = (df.assign(_order=df['method'].map(method_order))
                .sort_values(['kind', 'severity', '_order', 'seed'], kind='mergesort')
                .drop(columns='_order')
                .reset_index(drop=True))
        df.to_csv(self.path('sweep.csv'), index=False, float_format='%.6f')
        wide = df.pivot_table(index=['kind', 'severity', 'method'], columns='seed',
                              values='final_accuracy', aggfunc='first')
        wide.columns = [f'accuracy_seed{s}' for s in wide.columns]
        wide['mean_accuracy'] = wide.mean(axis=1)
        wide = wide.reset_index()
        wide = (wide.assign(_order=wide['method'].map(method_order))
                    .sort_values(['kind', 'severity', '_order'], kind='mergesort')
                    .drop(columns='_order'))
        wide.to_csv(self.path('sweep_summary.csv'), index=False, float_format='%.6f')
        self._timed('sweep', start)
        return df
