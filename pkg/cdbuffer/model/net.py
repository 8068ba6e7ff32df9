"""Small residual CNN whose BN inputs are exposed as feature taps."""

import copy
from collections import OrderedDict
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from cdbuffer import errors, io
from cdbuffer.model.layers import BatchNorm2d, Conv2d, Linear
from cdbuffer.tensor import Tensor, nn, no_grad, ops
from cdbuffer.util import Path, canonical_json, log, rng as make_rng, sha256_arrays

STREAM_INIT = 5

Taps = "OrderedDict[str, Tensor]"


class BufferHooks:
    """Interface the network calls into when buffers are attached.

    ``mask`` returns a per-channel multiplier for a BN layer's output (or
    None to leave it untouched); ``adapter`` returns the additive term for
    a residual block given the block input (or None).
    """

    def mask(self, layer: str) -> Optional[Tensor]:
        return None

    def adapter(self, block: str, x: Tensor) -> Optional[Tensor]:
        return None


def _apply_mask(y: Tensor, layer: str, hooks: Optional[BufferHooks]) -> Tensor:
    if hooks is None:
        return y
    m = hooks.mask(layer)
    if m is None:
        return y
    if m.shape != (y.shape[1],):
        raise errors.ConfigError(
            f'Mask for {layer} has shape {m.shape}; layer has {y.shape[1]} '
            'channels')
    return ops.mul(y, m)


class ConvBN:
    """conv -> BN -> relu unit (stem and stage transitions)."""

    def __init__(self, name: str, in_channels: int, out_channels: int,
                 kernel: int, stride: int, rng: np.random.Generator,
                 eps: float, momentum: float):
        self.name = name
        self.conv = Conv2d(f'{name}.conv', in_channels, out_channels, kernel,
                           stride, rng)
        self.bn = BatchNorm2d(f'{name}.bn', out_channels, eps, momentum)

    def forward(self, x: Tensor, taps: Taps, training: bool) -> Tensor:
        h = self.conv(x)
        taps[self.bn.name] = h
        return ops.relu(self.bn(h, training))

    def bn_layers(self) -> List[BatchNorm2d]:
        return [self.bn]

    def convs(self) -> List[Conv2d]:
        return [self.conv]


class BasicBlock:
    """conv-BN-relu-conv-BN plus identity shortcut, then relu.

    With hooks attached, each BN output is multiplied by the layer's mask
    and the adapter term is added to the block output before the final
    relu.
    """

    def __init__(self, name: str, channels: int, rng: np.random.Generator,
                 eps: float, momentum: float):
        self.name = name
        self.channels = channels
        self.conv1 = Conv2d(f'{name}.conv1', channels, channels, 3, 1, rng)
        self.bn1 = BatchNorm2d(f'{name}.bn1', channels, eps, momentum)
        self.conv2 = Conv2d(f'{name}.conv2', channels, channels, 3, 1, rng)
        self.bn2 = BatchNorm2d(f'{name}.bn2', channels, eps, momentum)

    def forward(self, x: Tensor, taps: Taps, training: bool,
                hooks: Optional[BufferHooks] = None) -> Tensor:
        h = self.conv1(x)
        taps[self.bn1.name] = h
        h = ops.relu(_apply_mask(self.bn1(h, training), self.bn1.name, hooks))
        h = self.conv2(h)
        taps[self.bn2.name] = h
        h = _apply_mask(self.bn2(h, training), self.bn2.name, hooks)
        out = ops.add(h, x)
        if hooks is not None:
            extra = hooks.adapter(self.name, x)
            if extra is not None:
                if extra.shape != out.shape:
                    raise errors.ConfigError(
                        f'Adapter output for {self.name} has shape '
                        f'{extra.shape}, block output is {out.shape}')
                out = ops.add(out, extra)
        return ops.relu(out)

    def bn_layers(self) -> List[BatchNorm2d]:
        return [self.bn1, self.bn2]

    def convs(self) -> List[Conv2d]:
        return [self.conv1, self.conv2]

    @property
    def output_layer(self) -> str:
        """BN layer whose channels form the block output."""
        return self.bn2.name


class Stage:
    def __init__(self, index: int, transition: Optional[ConvBN],
                 blocks: List[BasicBlock]):
        self.index = index
        self.transition = transition
        self.blocks = blocks


class ToyNet:
    """Stem, residual stages and a pooled linear head.

    Stage ``s`` (1-based) runs ``blocks_per_stage`` residual blocks of
    width ``widths[s-1]``; stages after the first open with a stride-2
    1x1 conv-BN-relu transition.

    Args:
        widths (list(int)): Channel width per stage. Defaults to (8, 16).
        blocks_per_stage (int): Residual blocks per stage. Defaults to 2.
        in_channels (int): Input channels. Defaults to 1.
        n_classes (int): Output classes. Defaults to 4.
        seed (int): Weight initialization seed. Defaults to 0.
        bn_eps (float): Batch norm epsilon. Defaults to 1e-5.
        bn_momentum (float): Running-stat momentum. Defaults to 0.1.
    """

    def __init__(
        self,
        widths: Sequence[int] = (8, 16),
        blocks_per_stage: int = 2,
        in_channels: int = 1,
        n_classes: int = 4,
        seed: int = 0,
        bn_eps: float = 1e-5,
        bn_momentum: float = 0.1
    ) -> None:
        if not widths or blocks_per_stage < 1:
            raise errors.ConfigError('ToyNet needs at least one stage and block')
        self.widths = [int(w) for w in widths]
        self.blocks_per_stage = int(blocks_per_stage)
        self.in_channels = int(in_channels)
        self.n_classes = int(n_classes)
        self.seed = int(seed)
        self.bn_eps = float(bn_eps)
        self.bn_momentum = float(bn_momentum)

        rng = make_rng(seed, STREAM_INIT)
        args = (rng, self.bn_eps, self.bn_momentum)
        self.stem = ConvBN('stem', in_channels, self.widths[0], 3, 1, *args)
        self.stages = []  # type: List[Stage]
        for s, width in enumerate(self.widths, start=1):
            transition = None
            if s > 1:
                transition = ConvBN(f'stage{s}.down', self.widths[s - 2],
                                    width, 1, 2, *args)
            blocks = [
                BasicBlock(f'stage{s}.block{b}', width, *args)
                for b in range(1, self.blocks_per_stage + 1)
            ]
            self.stages.append(Stage(s, transition, blocks))
        self.head = Linear('head', self.widths[-1], n_classes, rng)

    # --- Structure ----------------------------------------------------------
    def architecture(self) -> Dict[str, Any]:
        return {
            'widths': self.widths,
            'blocks_per_stage': self.blocks_per_stage,
            'in_channels': self.in_channels,
            'n_classes': self.n_classes,
            'seed': self.seed,
            'bn_eps': self.bn_eps,
            'bn_momentum': self.bn_momentum,
        }

    @classmethod
    def from_architecture(cls, arch: Dict[str, Any]) -> "ToyNet":
        return cls(**arch)

    def units(self) -> List[Any]:
        """Stem, transitions and blocks in execution order."""
        units = [self.stem]  # type: List[Any]
        for stage in self.stages:
            if stage.transition is not None:
                units.append(stage.transition)
            units.extend(stage.blocks)
        return units

    def bn_layers(self) -> List[BatchNorm2d]:
        """Every BN layer, in tap order."""
        return [bn for unit in self.units() for bn in unit.bn_layers()]

    def bn_layer(self, name: str) -> BatchNorm2d:
        for bn in self.bn_layers():
            if bn.name == name:
                return bn
        raise errors.ConfigError(f'No BN layer named {name!r}')

    def blocks(self) -> List[Tuple[int, BasicBlock]]:
        """(stage index, block) pairs in execution order."""
        return [(stage.index, b) for stage in self.stages for b in stage.blocks]

    def convs(self) -> List[Conv2d]:
        return [c for unit in self.units() for c in unit.convs()]

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        params = OrderedDict()  # type: OrderedDict[str, Tensor]
        for unit in self.units():
            for conv in unit.convs():
                params.update(conv.parameters())
            for bn in unit.bn_layers():
                params.update(bn.parameters())
        params.update(self.head.parameters())
        return params

    def parameter_groups(self) -> Dict[str, List[Tensor]]:
        return {
            'conv': [c.weight for c in self.convs()],
            'bn': [p for bn in self.bn_layers() for p in (bn.gamma, bn.beta)],
            'head': [self.head.weight, self.head.bias],
        }

    def set_trainable(self, conv: bool, bn: bool, head: bool) -> None:
        flags = {'conv': conv, 'bn': bn, 'head': head}
        for group, tensors in self.parameter_groups().items():
            for t in tensors:
                t.requires_grad = flags[group]
                t.zero_grad()

    # --- State --------------------------------------------------------------
    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict(
            (k, v.data) for k, v in self.named_parameters().items()
        )  # type: OrderedDict[str, np.ndarray]
        for bn in self.bn_layers():
            state.update(bn.buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = [k for k in own if k not in state]
        if missing:
            raise errors.ConfigError(f'State is missing entries: {missing}')
        params = self.named_parameters()
        for key, value in state.items():
            if key not in own:
                log.warning(f'Ignoring unexpected state entry {key}')
                continue
            value = np.array(value, dtype=np.float64)
            if value.shape != own[key].shape:
                raise errors.ConfigError(
                    f'State entry {key} has shape {value.shape}, expected '
                    f'{own[key].shape}')
            if key in params:
                params[key].data = value
            else:
                layer, attr = key.rsplit('.', 1)
                self.bn_layer(layer).set_buffer(attr, value)

    def hash(self) -> str:
        return sha256_arrays(self.state_dict().values(),
                             extra=canonical_json(self.architecture()))

    def copy(self) -> "ToyNet":
        return copy.deepcopy(self)

    def tap_shapes(self, size: int = 16) -> "OrderedDict[str, Tuple[int, ...]]":
        """Per-sample [C, H, W] of every tap for a square input."""
        with no_grad():
            _, taps = self.forward_with_taps(
                Tensor(np.zeros((1, self.in_channels, size, size))))
        return OrderedDict((k, v.shape[1:]) for k, v in taps.items())

    # --- Forward ------------------------------------------------------------
    def forward_with_taps(
        self,
        batch: Tensor,
        hooks: Optional[BufferHooks] = None,
        training: bool = False
    ) -> Tuple[Tensor, Taps]:
        """Logits [N, K] and the tensors entering each BN layer, in order."""
        if batch.ndim != 4 or batch.shape[0] == 0:
            raise errors.DimensionError(
                f'Expected a nonempty [N,C,H,W] batch, got {batch.shape}')
        if batch.shape[1] != self.in_channels:
            raise errors.DimensionError(
                f'Input axis 1 (channels) = {batch.shape[1]}, network expects '
                f'{self.in_channels}')
        taps = OrderedDict()  # type: OrderedDict[str, Tensor]
        h = self.stem.forward(batch, taps, training)
        for stage in self.stages:
            if stage.transition is not None:
                h = stage.transition.forward(h, taps, training)
            for block in stage.blocks:
                h = block.forward(h, taps, training, hooks)
        logits = self.head(nn.global_avg_pool(h))
        return logits, taps

    def __call__(self, batch: Tensor, hooks: Optional[BufferHooks] = None) -> Tensor:
        return self.forward_with_taps(batch, hooks)[0]

    # --- Persistence --------------------------------------------------------
    def save(
        self,
        path: Path,
        extra: Optional[Dict[str, np.ndarray]] = None,
        meta: Optional[Dict[str, Any]] = None
    ) -> None:
        """Write a checkpoint; ``extra`` arrays and ``meta`` ride along."""
        arrays = OrderedDict(
            (f'net/{k}', v) for k, v in self.state_dict().items()
        )  # type: OrderedDict[str, np.ndarray]
        arrays.update(extra or {})
        meta = dict(meta or {}, architecture=self.architecture())
        meta.setdefault('kind', 'model')
        io.write_arrays(path, io.CHECKPOINT_FORMAT, arrays, meta)
        log.debug(f'Saved network checkpoint to {path}')

    @classmethod
    def load(cls, path: Path) -> "ToyNet":
        return cls.read_checkpoint(path)[0]

    @classmethod
    def read_checkpoint(
        cls,
        path: Path
    ) -> Tuple["ToyNet", "OrderedDict[str, np.ndarray]", Dict[str, Any]]:
        """Network plus the remaining arrays and metadata of a checkpoint."""
        arrays, meta = io.read_arrays(path, io.CHECKPOINT_FORMAT)
        if 'architecture' not in meta:
            raise errors.RecordError(f'{path} does not describe a network')
        net = cls.from_architecture(meta['architecture'])
        net.load_state_dict(OrderedDict(
            (k[len('net/'):], v) for k, v in arrays.items() if k.startswith('net/')))
        rest = OrderedDict(
            (k, v) for k, v in arrays.items() if not k.startswith('net/'))
        return net, rest, meta
