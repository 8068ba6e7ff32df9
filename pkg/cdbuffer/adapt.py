"""Test-time adaptation loop.

Each step recomputes the suppression threshold, runs the buffered
forward, measures the discrepancy from that forward's taps, backpropagates
the alignment and mask losses, rescales adapter gradients by block
discrepancy, applies a gradient-descent update and finally reactivates
some suppressed channels.
"""

from collections import OrderedDict
from typing import Any, Dict, Iterable, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

import cdbuffer.util.colors as col
from cdbuffer import discrepancy, errors
from cdbuffer.buffers import CDBuffer, MaskSnapshot, mask_loss, reactivate
from cdbuffer.config import ExperimentConfig
from cdbuffer.dataset import ToyDataset
from cdbuffer.discrepancy import DiscrepancyScore
from cdbuffer.model import ToyNet, accuracy
from cdbuffer.stats import SourceStats
from cdbuffer.tensor import Tape, Tensor, backward, no_grad, ops
from cdbuffer.util import Box, Path, canonical_json, events, log, progress_disabled
from cdbuffer.util import rng as make_rng
from cdbuffer.util import sha256_arrays

STREAM_REACTIVATE = 17
STREAM_TARGET = 19

CSV_COLUMNS = ('step', 'loss_align', 'loss_mask', 'loss_total', 'suppressed',
               'reactivated', 'accuracy')


class Batch(NamedTuple):
    images: np.ndarray                  # [N, 1, H, W]
    boxes: List[Tuple[Box, ...]]


def batch_stream(
    dataset: ToyDataset,
    batch_size: int,
    steps: int,
    seed: int,
    key: int = 0
) -> Iterator[Batch]:
    """``steps`` target batches drawn from reshuffled passes over ``dataset``.

    Incomplete trailing batches are dropped unless the dataset is smaller
    than one batch.
    """
    if not len(dataset):
        raise errors.EmptyDatasetError('target dataset')
    rng = make_rng(seed, STREAM_TARGET, key)
    size = min(batch_size, len(dataset))
    emitted = 0
    while emitted < steps:
        for idx in dataset.batches(size, rng):
            if len(idx) < size:
                continue
            yield Batch(dataset.pixels(idx), dataset.boxes(idx))
            emitted += 1
            if emitted >= steps:
                return


class StepReport(NamedTuple):
    step: int
    loss_align: float
    loss_mask: float
    loss_total: float
    lambda_reg: float
    suppressed: int
    reactivated: int
    tau: float
    layer_discrepancy: Dict[str, float]
    accuracy: Optional[float] = None
    segment: int = 0
    severity: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        d = self._asdict()
        d['layer_discrepancy'] = dict(self.layer_discrepancy)
        return d

    def csv_row(self) -> Dict[str, Any]:
        row = {c: getattr(self, c) for c in CSV_COLUMNS}
        if row['accuracy'] is None:
            row['accuracy'] = ''
        return row


class LossBreakdown(NamedTuple):
    align: Tensor
    mask: Tensor
    total: Tensor
    align_layers: Dict[str, float]
    mask_layers: Dict[str, float]
    score: DiscrepancyScore

    def decomposition(self) -> Dict[str, float]:
        out = OrderedDict()  # type: OrderedDict[str, float]
        for name, v in self.align_layers.items():
            out[f'align/{name}'] = v
        for name, v in self.mask_layers.items():
            out[f'mask/{name}'] = v
        return out


class AdaptState:
    """Everything the adaptation loop mutates.

    The network is a private copy whose conv weights and classifier head
    are frozen; BN affine parameters, adapter parameters and mask scores
    are the three trainable groups.

    Args:
        net (ToyNet): Network copy owned by this state.
        buffer (CDBuffer): Buffers attached to ``net``.
        config (ExperimentConfig): Hyperparameters.
        rng (np.random.Generator): Reactivation stream.
        step_count (int): Steps taken so far.
    """

    def __init__(
        self,
        net: ToyNet,
        buffer: CDBuffer,
        config: ExperimentConfig,
        rng: np.random.Generator,
        step_count: int = 0
    ) -> None:
        self.net = net
        self.buffer = buffer
        self.config = config
        self.rng = rng
        self.step_count = step_count
        self.net.set_trainable(conv=False, bn=True, head=False)

    @classmethod
    def create(
        cls,
        net: ToyNet,
        config: ExperimentConfig,
        seed: Optional[int] = None
    ) -> "AdaptState":
        """Fresh state on a copy of ``net``; the caller's network is untouched."""
        seed = config.seed if seed is None else seed
        own = net.copy()
        buffer = CDBuffer.attach(
            own, seed,
            rho_target=config.rho_target, lambda_s=config.lambda_s,
            lambda_a=config.lambda_a, k=config.k, r=config.r,
            alpha_init=config.alpha_init, stage_enable=config.stage_enable,
            subtractive_on=config.subtractive_on,
            additive_on=config.additive_on, coupling_on=config.coupling_on)
        return cls(own, buffer, config, make_rng(seed, STREAM_REACTIVATE))

    def __repr__(self) -> str:
        return (f'AdaptState(step_count={self.step_count}, '
                f'method={self.config.method!r})')

    def parameter_groups(self) -> Dict[str, List[Tensor]]:
        groups = {'bn': self.net.parameter_groups()['bn']}
        groups.update(self.buffer.parameter_groups())
        return groups

    def parameters(self) -> List[Tensor]:
        g = self.parameter_groups()
        return g['bn'] + g['adapter'] + g['scores']

    def gammas(self) -> Dict[str, np.ndarray]:
        return OrderedDict((name, self.net.bn_layer(name).gamma.data)
                           for name in self.buffer.masked_layers)

    def hooks(self, snapshot: MaskSnapshot):
        return self.buffer.bind(snapshot)

    def _rng_state(self) -> Dict[str, Any]:
        return self.rng.bit_generator.state

    def hash(self) -> str:
        arrays = list(self.net.state_dict().values()) + list(self.buffer.arrays().values())
        extra = canonical_json({'step_count': self.step_count,
                                'rng': self._rng_state()})
        return sha256_arrays(arrays, extra=extra)

    # --- Persistence --------------------------------------------------------
    def save(self, path: Path) -> None:
        meta = {
            'kind': 'adapt',
            'step_count': self.step_count,
            'rng_state': self._rng_state(),
            'config': self.config.get_dict(),
        }
        self.net.save(path, extra=self.buffer.arrays(), meta=meta)
        log.debug(f'Saved adaptation checkpoint (step {self.step_count}) to {path}')

    @classmethod
    def load(cls, path: Path) -> "AdaptState":
        net, arrays, meta = ToyNet.read_checkpoint(path)
        if meta.get('kind') != 'adapt':
            raise errors.RecordError(f'{path} is not an adaptation checkpoint')
        config = ExperimentConfig.from_dict(meta['config'])
        state = cls.create(net, config)
        state.buffer.load_arrays(arrays)
        state.rng.bit_generator.state = meta['rng_state']
        state.step_count = int(meta['step_count'])
        return state


# --- Losses ------------------------------------------------------------------
def align_loss(
    taps: Mapping[str, Tensor],
    stats: SourceStats
) -> Tuple[Tensor, Dict[str, float]]:
    """Per layer, mean-over-channels L1 gap of the batch channel mean and
    std to the source; summed over layers."""
    stats.check_layers(list(taps.keys()))
    terms = []
    per_layer = OrderedDict()  # type: OrderedDict[str, float]
    for name, x in taps.items():
        ref = stats.layers[name]
        mu = ops.mean(x, (0, 2, 3))
        centered = ops.sub(x, mu)
        std = ops.sqrt(ops.mean(ops.square(centered), (0, 2, 3)))
        term = ops.add(ops.l1_mean_distance(mu, Tensor(ref.dist_mean)),
                       ops.l1_mean_distance(std, Tensor(ref.dist_std)))
        per_layer[name] = term.item()
        terms.append(term)
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return total, per_layer


def total_loss(loss_align, loss_mask, lambda_reg: float):
    """loss_align + lambda_reg * loss_mask, for Tensors or plain floats."""
    if isinstance(loss_align, Tensor):
        return ops.add(loss_align, ops.scale(loss_mask, lambda_reg))
    return loss_align + lambda_reg * loss_mask


def scale_adapter_grads(
    buffer: CDBuffer,
    layer_d: Mapping[str, float],
    clamp: Sequence[float] = (0.5, 2.0)
) -> Dict[str, float]:
    """Multiply each block's adapter gradients by its discrepancy gain.

    The gain is the block's mean layer discrepancy over the mean across
    blocks, clamped. Without discrepancy every gain is 1.

    Returns:
        Block name -> gain applied.
    """
    lo, hi = clamp
    block_d = OrderedDict(
        (block, float(np.mean([layer_d[l] for l in layers])))
        for block, layers in buffer.block_layers.items()
        if block in buffer.additive
    )
    if not block_d:
        return {}
    mean = float(np.mean(list(block_d.values())))
    if not mean > discrepancy.ZERO_GUARD:
        return {block: 1.0 for block in block_d}
    gains = OrderedDict()  # type: OrderedDict[str, float]
    for block, d in block_d.items():
        gain = float(np.clip(d / mean, lo, hi))
        gains[block] = gain
        if gain == 1.0:
            continue
        for p in buffer.additive[block].parameters().values():
            if p.grad is not None:
                p.grad = p.grad * gain
    return gains


def compute_losses(
    state: AdaptState,
    images: np.ndarray,
    boxes: Sequence[Sequence[Box]],
    stats: SourceStats,
    snapshot: MaskSnapshot,
    score: Optional[DiscrepancyScore] = None
) -> LossBreakdown:
    """Buffered forward plus every loss term.

    The discrepancy is measured on this forward's taps unless ``score`` is
    given; it enters the mask loss as a constant either way.
    """
    cfg = state.config
    hooks = state.hooks(snapshot)
    _, taps = state.net.forward_with_taps(Tensor(images), hooks, training=False)
    if score is None:
        score = discrepancy.score(taps, boxes, stats, cfg.metric,
                                  cfg.discrepancy_norm)
    align, align_layers = align_loss(taps, stats)
    scores = state.buffer.mask_state.scores
    weights = OrderedDict((name, score[name].combined) for name in scores)
    mask = mask_loss(weights, scores)
    mask_layers = OrderedDict(
        (name, float(np.mean(np.abs(weights[name] * s.data))))
        for name, s in scores.items())
    total = total_loss(align, mask, cfg.effective_lambda_reg)
    return LossBreakdown(align, mask, total, align_layers, mask_layers, score)


# --- Loop --------------------------------------------------------------------
def adapt_step(state: AdaptState, batch: Batch, stats: SourceStats) -> StepReport:
    """One full adaptation step on a target batch."""
    cfg = state.config
    snapshot = state.buffer.snapshot(straight_through=True)
    params = state.parameters()
    for p in params:
        p.zero_grad()
    with Tape():
        losses = compute_losses(state, batch.images, batch.boxes, stats, snapshot)
        if not np.isfinite(losses.total.item()):
            raise errors.AdaptationError(state.step_count, losses.decomposition())
        backward(losses.total)

    if cfg.grad_scaling_on and cfg.additive_on:
        gains = scale_adapter_grads(state.buffer, losses.score.layer_values(),
                                    cfg.grad_clamp)
        log.debug(f'Adapter gradient gains: {gains}')

    # Update weights
    for p in params:
        if p.grad is not None:
            p.data = p.data - cfg.lr * p.grad
        p.zero_grad()

    reactivated = 0
    if cfg.subtractive_on:
        reactivated = reactivate(state.buffer.mask_state, state.gammas(),
                                 state.rng, snapshot.hard)
    state.step_count += 1
    return StepReport(
        step=state.step_count,
        loss_align=losses.align.item(),
        loss_mask=losses.mask.item(),
        loss_total=losses.total.item(),
        lambda_reg=cfg.effective_lambda_reg,
        suppressed=snapshot.suppressed() if cfg.subtractive_on else 0,
        reactivated=reactivated,
        tau=snapshot.tau,
        layer_discrepancy=losses.score.layer_values())


def evaluate(state: AdaptState, dataset: ToyDataset) -> float:
    """Accuracy with the current buffers (hard masks, current adapters).

    Nothing in ``state`` is modified.
    """
    if not len(dataset):
        raise errors.EmptyDatasetError('evaluation dataset')
    snapshot = state.buffer.snapshot(straight_through=False)
    with no_grad():
        return accuracy(state.net, dataset, state.hooks(snapshot))


def adapt_stream(
    state: AdaptState,
    stream: Iterable[Batch],
    stats: SourceStats,
    eval_set: Optional[ToyDataset] = None,
    eval_every: int = 0,
    segment: int = 0,
    severity: Optional[float] = None,
    total: Optional[int] = None
) -> List[StepReport]:
    """Run :func:`adapt_step` over ``stream``.

    With an evaluation set, accuracy is measured every ``eval_every``
    steps and after the last step.
    """
    reports = []  # type: List[StepReport]
    label = col.bold(col.blue(state.config.method))
    pb = tqdm(stream, total=total, unit='step', leave=False,
              disable=progress_disabled())
    for batch in pb:
        report = adapt_step(state, batch, stats)
        acc = None
        if eval_set is not None and eval_every and report.step % eval_every == 0:
            acc = evaluate(state, eval_set)
            log.info(f'{label} step {report.step} | loss {report.loss_total:.4f} '
                     f'| suppressed {report.suppressed} | acc {acc:.4f}')
        reports.append(report._replace(accuracy=acc, segment=segment,
                                       severity=severity))
        pb.set_description(f'{label} loss: {report.loss_total:.4f}')
    pb.close()
    if reports and eval_set is not None and reports[-1].accuracy is None:
        reports[-1] = reports[-1]._replace(accuracy=evaluate(state, eval_set))
    if events:
        log.debug(f'Degenerate events so far: {dict(events)}')
    return reports


def adapt_continual(
    state: AdaptState,
    segments: Sequence[Tuple[float, Iterable[Batch], Optional[ToyDataset]]],
    stats: SourceStats,
    eval_every: int = 0,
    steps_per_segment: Optional[int] = None
) -> List[StepReport]:
    """Consecutive target segments sharing one state.

    ``segments`` holds (severity, stream, eval set) triples; reports carry
    the index and severity of their segment.
    """
    reports = []  # type: List[StepReport]
    for i, (severity, stream, eval_set) in enumerate(segments):
        log.info(f'Continual segment {i} (severity {severity})')
        reports.extend(adapt_stream(state, stream, stats, eval_set, eval_every,
                                    segment=i, severity=severity,
                                    total=steps_per_segment))
    return reports
