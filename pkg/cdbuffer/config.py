"""Experiment hyperparameters, method presets and ablation rows."""

import copy
import hashlib
import json
from collections import OrderedDict
from typing import Any, Dict, List, Optional, Sequence

from cdbuffer import errors
from cdbuffer.corruption import KINDS
from cdbuffer.discrepancy import METRICS, NORMALIZERS
from cdbuffer.util import Path, canonical_json, env_seed, load_json, log

METHODS = ('direct', 'additive_only', 'subtractive_only', 'parallel', 'full')

# (mask_loss_on, subtractive_on, additive_on, grad_scaling_on)
ABLATION_ROWS = OrderedDict([
    ('bn_only',                 (False, False, False, False)),
    ('sub_no_mask_loss',        (False, True,  False, False)),
    ('sub',                     (True,  True,  False, False)),
    ('add',                     (True,  False, True,  False)),
    ('sub_add',                 (True,  True,  True,  False)),
    ('sub_add_gs_no_mask_loss', (False, True,  True,  True)),
    ('full',                    (True,  True,  True,  True)),
])

_METHOD_SWITCHES = {
    # mask_loss_on, subtractive_on, additive_on, grad_scaling_on, coupling_on
    'direct':           (False, False, False, False, False),
    'additive_only':    (False, False, True,  False, False),
    'subtractive_only': (True,  True,  False, False, False),
    'parallel':         (True,  True,  True,  False, False),
    'full':             (True,  True,  True,  True,  True),
}


class ExperimentConfig:
    """Build a set of experiment hyperparameters."""

    def __init__(
        self,
        *,
        lambda_reg: float = 0.05,
        lambda_s: float = 0.05,
        lambda_a: float = 0.1,
        rho_target: float = 0.05,
        lr: float = 1e-4,
        batch_size: int = 16,
        k: float = 10.0,
        r: float = 0.05,
        alpha_init: float = 0.01,
        bn_eps: float = 1e-5,
        bn_momentum: float = 0.1,
        instance_size: int = 4,
        grad_clamp: Sequence[float] = (0.5, 2.0),
        mask_loss_on: bool = True,
        subtractive_on: bool = True,
        additive_on: bool = True,
        grad_scaling_on: bool = True,
        coupling_on: bool = True,
        stage_enable: Sequence[bool] = (True, True),
        metric: str = 'l1',
        discrepancy_norm: str = 'source',
        method: str = 'full',
        widths: Sequence[int] = (8, 16),
        blocks_per_stage: int = 2,
        corruption_kind: str = 'haze_mix',
        corruption_severity: float = 0.7,
        continual_severities: Sequence[float] = (),
        steps: int = 300,
        eval_every: int = 50,
        seed: Optional[int] = None,
        n_seeds: int = 1,
        n_train: int = 1000,
        n_eval: int = 400,
        n_target: int = 512,
        source_epochs: int = 12,
        source_lr: float = 0.1,
        source_batch_size: int = 32,
        sweep_kinds: Sequence[str] = ('gaussian_noise', 'haze_mix'),
        sweep_severities: Sequence[float] = (0.3, 0.5, 0.8),
        workers: int = 1
    ) -> None:
        """Collection of hyperparameters for source training and adaptation.

        Args:
            lambda_reg (float, optional): Weight of the mask regularizer in
                the total loss. Defaults to 0.05.
            lambda_s (float, optional): Subtractive soft-mask temperature.
                Defaults to 0.05.
            lambda_a (float, optional): Additive inverse-mask temperature;
                must exceed lambda_s. Defaults to 0.1.
            rho_target (float, optional): Network-wide suppression ratio.
                Defaults to 0.05.
            lr (float, optional): Adaptation learning rate. Defaults to 1e-4.
            batch_size (int, optional): Target batch size. Defaults to 16.
            k (float, optional): Range of the inverse mask. Defaults to 10.
            r (float, optional): Reactivation probability. Defaults to 0.05.
            alpha_init (float, optional): Initial adapter scale.
                Defaults to 0.01.
            bn_eps (float, optional): BN epsilon. Defaults to 1e-5.
            bn_momentum (float, optional): BN running-stat momentum.
                Defaults to 0.1.
            instance_size (int, optional): Side of RoI crops. Defaults to 4.
            grad_clamp (list(float), optional): Bounds of the adapter
                gradient gain. Defaults to [0.5, 2.0].
            mask_loss_on (bool, optional): Use the mask regularizer; when
                off the regularizer weight is treated as 0. Defaults to True.
            subtractive_on (bool, optional): Mask BN outputs. Defaults to True.
            additive_on (bool, optional): Add adapter outputs. Defaults to True.
            grad_scaling_on (bool, optional): Scale adapter gradients by
                block discrepancy. Defaults to True.
            coupling_on (bool, optional): Modulate adapters by the inverse
                soft mask. Defaults to True.
            stage_enable (list(bool), optional): Attach buffers per stage.
                Defaults to [True, True].
            metric (str, optional): 'l1', 'l2' or 'cosine'. Defaults to 'l1'.
            discrepancy_norm (str, optional): 'source' (reference scales) or
                'batch' (per-batch unit mean). Defaults to 'source'.
            method (str, optional): Label of this configuration.
                Defaults to 'full'.
            widths (list(int), optional): Channel widths per stage.
                Defaults to [8, 16].
            blocks_per_stage (int, optional): Defaults to 2.
            corruption_kind (str, optional): Target corruption.
                Defaults to 'haze_mix'.
            corruption_severity (float, optional): Defaults to 0.7.
            continual_severities (list(float), optional): Consecutive target
                segments sharing one adaptation state. Empty for a single
                segment at corruption_severity. Defaults to [].
            steps (int, optional): Adaptation steps per segment.
                Defaults to 300.
            eval_every (int, optional): Evaluation cadence in steps; 0
                evaluates only at the end. Defaults to 50.
            seed (int, optional): Master seed. Defaults to $CDBUF_SEED or 0.
            n_seeds (int, optional): Repetitions for ablate and sweep.
                Defaults to 1.
            n_train (int, optional): Source training images. Defaults to 1000.
            n_eval (int, optional): Evaluation images. Defaults to 400.
            n_target (int, optional): Target stream images. Defaults to 512.
            source_epochs (int, optional): Defaults to 12.
            source_lr (float, optional): Defaults to 0.1.
            source_batch_size (int, optional): Defaults to 32.
            sweep_kinds (list(str), optional): Corruptions of the sweep grid.
                Defaults to ['gaussian_noise', 'haze_mix'].
            sweep_severities (list(float), optional): Severities of the sweep
                grid. Defaults to [0.3, 0.5, 0.8].
            workers (int, optional): Process pool size for ablate and sweep.
                Defaults to 1.
        """
        self.lambda_reg = lambda_reg
        self.lambda_s = lambda_s
        self.lambda_a = lambda_a
        self.rho_target = rho_target
        self.lr = lr
        self.batch_size = batch_size
        self.k = k
        self.r = r
        self.alpha_init = alpha_init
        self.bn_eps = bn_eps
        self.bn_momentum = bn_momentum
        self.instance_size = instance_size
        self.grad_clamp = list(grad_clamp)
        self.mask_loss_on = mask_loss_on
        self.subtractive_on = subtractive_on
        self.additive_on = additive_on
        self.grad_scaling_on = grad_scaling_on
        self.coupling_on = coupling_on
        self.stage_enable = list(stage_enable)
        self.metric = metric
        self.discrepancy_norm = discrepancy_norm
        self.method = method
        self.widths = list(widths)
        self.blocks_per_stage = blocks_per_stage
        self.corruption_kind = corruption_kind
        self.corruption_severity = corruption_severity
        self.continual_severities = list(continual_severities)
        self.steps = steps
        self.eval_every = eval_every
        self.seed = env_seed() if seed is None else seed
        self.n_seeds = n_seeds
        self.n_train = n_train
        self.n_eval = n_eval
        self.n_target = n_target
        self.source_epochs = source_epochs
        self.source_lr = source_lr
        self.source_batch_size = source_batch_size
        self.sweep_kinds = list(sweep_kinds)
        self.sweep_severities = list(sweep_severities)
        self.workers = workers
        self.validate()

    def __repr__(self) -> str:
        base = "ExperimentConfig("
        for arg in self._get_args():
            base += "\n  {} = {!r},".format(arg, getattr(self, arg))
        base += "\n)"
        return base

    def __str__(self) -> str:
        return json.dumps(self.get_dict(), indent=2, sort_keys=True)

    def __eq__(self, other: Any) -> bool:
        return isinstance(other, ExperimentConfig) and self.get_dict() == other.get_dict()

    @classmethod
    def from_dict(cls, hp_dict: Dict[str, Any]) -> "ExperimentConfig":
        obj = cls()
        obj.load_dict(hp_dict)
        return obj

    @classmethod
    def from_json(cls, path: Path) -> "ExperimentConfig":
        return cls.from_dict(load_json(path))

    def _get_args(self) -> List[str]:
        return [arg for arg in vars(self) if not arg.startswith('_')]

    def get_dict(self) -> Dict[str, Any]:
        return {arg: copy.copy(getattr(self, arg)) for arg in self._get_args()}

    def load_dict(self, hp_dict: Dict[str, Any]) -> None:
        for key, value in hp_dict.items():
            if not hasattr(self, key):
                raise errors.ConfigError(f'Unrecognized hyperparameter {key}')
            setattr(self, key, value)
        self.validate()

    def replace(self, **kwargs: Any) -> "ExperimentConfig":
        """Copy with some fields changed (and re-validated)."""
        d = self.get_dict()
        d.update(kwargs)
        obj = ExperimentConfig(seed=d['seed'])
        obj.load_dict(d)
        return obj

    def to_json(self) -> str:
        return canonical_json(self.get_dict())

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode('utf-8')).hexdigest()

    @property
    def effective_lambda_reg(self) -> float:
        return self.lambda_reg if self.mask_loss_on else 0.0

    @property
    def segments(self) -> List[float]:
        """Severity of every target segment, in order."""
        return self.continual_severities or [self.corruption_severity]

    def validate(self) -> bool:
        """Check that hyperparameter combinations are valid."""

        def check(cond: bool, msg: str) -> None:
            if not cond:
                raise errors.ConfigError(msg)

        def number(x: Any) -> bool:
            return isinstance(x, (int, float)) and not isinstance(x, bool)

        def integer(x: Any) -> bool:
            return isinstance(x, int) and not isinstance(x, bool)

        for name in ('lambda_reg', 'lambda_s', 'lambda_a', 'rho_target', 'lr',
                     'k', 'r', 'alpha_init', 'bn_eps', 'bn_momentum',
                     'corruption_severity', 'source_lr'):
            check(number(getattr(self, name)), f'{name} must be a number')
        for name in ('batch_size', 'instance_size', 'blocks_per_stage', 'steps',
                     'eval_every', 'seed', 'n_seeds', 'n_train', 'n_eval',
                     'n_target', 'source_epochs', 'source_batch_size', 'workers'):
            check(integer(getattr(self, name)), f'{name} must be an integer')
        for name in ('mask_loss_on', 'subtractive_on', 'additive_on',
                     'grad_scaling_on', 'coupling_on'):
            check(isinstance(getattr(self, name), bool), f'{name} must be a bool')

        check(self.lambda_reg >= 0, 'lambda_reg must be >= 0')
        check(self.lambda_s > 0, 'lambda_s must be > 0')
        check(self.lambda_a > self.lambda_s,
              f'lambda_a ({self.lambda_a}) must exceed lambda_s ({self.lambda_s})')
        check(0 <= self.rho_target < 1, 'rho_target must be in [0, 1)')
        check(self.lr >= 0, 'lr must be >= 0')
        check(self.k > 0, 'k must be > 0')
        check(0 <= self.r <= 1, 'r must be in [0, 1]')
        check(self.bn_eps > 0, 'bn_eps must be > 0')
        check(0 < self.bn_momentum <= 1, 'bn_momentum must be in (0, 1]')
        check(self.batch_size >= 1 and self.source_batch_size >= 1,
              'batch sizes must be >= 1')
        check(self.instance_size >= 1, 'instance_size must be >= 1')
        check(len(self.grad_clamp) == 2 and all(number(g) for g in self.grad_clamp)
              and 0 < self.grad_clamp[0] <= 1 <= self.grad_clamp[1],
              'grad_clamp must be [lo, hi] with 0 < lo <= 1 <= hi')
        check(len(self.widths) >= 1 and all(integer(w) and w >= 1 for w in self.widths),
              'widths must be positive integers')
        check(self.blocks_per_stage >= 1, 'blocks_per_stage must be >= 1')
        check(len(self.stage_enable) == len(self.widths)
              and all(isinstance(s, bool) for s in self.stage_enable),
              f'stage_enable needs one bool per stage ({len(self.widths)})')
        check(any(self.stage_enable), 'stage_enable must enable at least one stage')
        check(self.metric in METRICS, f"metric must be one of {', '.join(METRICS)}")
        check(self.discrepancy_norm in NORMALIZERS,
              f"discrepancy_norm must be one of {', '.join(NORMALIZERS)}")
        check(isinstance(self.method, str) and bool(self.method), 'method must be a label')
        check(self.corruption_kind in KINDS,
              f"corruption_kind must be one of {', '.join(KINDS)}")
        check(all(k in KINDS for k in self.sweep_kinds),
              f"sweep_kinds must be drawn from {', '.join(KINDS)}")
        for sev in ([self.corruption_severity] + self.continual_severities
                    + self.sweep_severities):
            check(number(sev) and 0 <= sev <= 1, f'severity {sev} outside [0, 1]')
        check(self.steps >= 0 and self.eval_every >= 0, 'steps/eval_every must be >= 0')
        check(self.seed >= 0, 'seed must be >= 0')
        check(self.n_seeds >= 1 and self.workers >= 1, 'n_seeds/workers must be >= 1')
        check(min(self.n_train, self.n_eval, self.n_target) >= 1,
              'dataset sizes must be >= 1')
        check(self.source_epochs >= 0, 'source_epochs must be >= 0')
        return True


def method_config(base: ExperimentConfig, method: str) -> ExperimentConfig:
    """Config realising one of :data:`METHODS` on top of ``base``."""
    if method not in _METHOD_SWITCHES:
        raise errors.ConfigError(
            f"Unknown method {method!r}; choose from {', '.join(METHODS)}")
    mask_loss, sub, add, gs, coupling = _METHOD_SWITCHES[method]
    kwargs = dict(mask_loss_on=mask_loss, subtractive_on=sub, additive_on=add,
                  grad_scaling_on=gs, coupling_on=coupling, method=method)
    if method == 'direct':
        kwargs['steps'] = 0
    return base.replace(**kwargs)


def ablation_configs(base: ExperimentConfig) -> "OrderedDict[str, ExperimentConfig]":
    """The switch-combination rows plus the single-buffer and parallel modes."""
    rows = OrderedDict()  # type: OrderedDict[str, ExperimentConfig]
    for name, (mask_loss, sub, add, gs) in ABLATION_ROWS.items():
        rows[name] = base.replace(
            mask_loss_on=mask_loss, subtractive_on=sub, additive_on=add,
            grad_scaling_on=gs, coupling_on=True, method=f'ablate:{name}')
    for method in ('additive_only', 'subtractive_only', 'parallel'):
        rows[method] = method_config(base, method)
    log.debug(f'Built {len(rows)} ablation configurations')
    return rows
