'''Subtractive and additive buffers and their attachment to a network.'''

from collections import OrderedDict
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from cdbuffer import errors
from cdbuffer.buffers.additive import (AdapterParams, AdditiveBuffer,
                                       adapter_forward, apply_additive,
                                       init_adapter, inverse_soft_mask)
from cdbuffer.buffers.subtractive import (MaskSnapshot, MaskState,
                                          apply_subtractive, compute_threshold,
                                          hard_mask, init_scores, mask_loss,
                                          reactivate, soft_mask, ste_mask)
from cdbuffer.model import BufferHooks, ToyNet
from cdbuffer.tensor import Tensor
from cdbuffer.util import log


class CDBuffer:
    """Both buffers of one network, sharing a single :class:`MaskState`.

    Masked layers are the BN layers inside residual blocks of enabled
    stages; every such block also gets one adapter, modulated by the scores
    of the block's output BN layer.

    Args:
        mask_state (MaskState): Scores of every masked layer.
        additive (AdditiveBuffer): Adapters of every buffered block.
        block_layers (dict): Block name -> its BN layer names.
        subtractive_on (bool): Apply masks. Defaults to True.
        additive_on (bool): Add adapter outputs. Defaults to True.
        coupling_on (bool): Modulate adapters by the inverse soft mask.
            Defaults to True.
    """

    def __init__(
        self,
        mask_state: MaskState,
        additive: AdditiveBuffer,
        block_layers: "OrderedDict[str, List[str]]",
        subtractive_on: bool = True,
        additive_on: bool = True,
        coupling_on: bool = True
    ) -> None:
        if additive.lambda_a <= mask_state.lambda_s:
            raise errors.ConfigError(
                f'lambda_a ({additive.lambda_a}) must exceed lambda_s '
                f'({mask_state.lambda_s})')
        self.mask_state = mask_state
        self.additive = additive
        self.block_layers = block_layers
        self.subtractive_on = subtractive_on
        self.additive_on = additive_on
        self.coupling_on = coupling_on

    @classmethod
    def attach(
        cls,
        net: ToyNet,
        seed: int,
        *,
        rho_target: float = 0.05,
        lambda_s: float = 0.05,
        lambda_a: float = 0.1,
        k: float = 10.0,
        r: float = 0.05,
        alpha_init: float = 0.01,
        stage_enable: Optional[Sequence[bool]] = None,
        subtractive_on: bool = True,
        additive_on: bool = True,
        coupling_on: bool = True
    ) -> "CDBuffer":
        """Build fresh buffers for ``net``: scores from |gamma|, new adapters."""
        if stage_enable is None:
            stage_enable = [True] * len(net.stages)
        if len(stage_enable) != len(net.stages):
            raise errors.ConfigError(
                f'stage_enable has {len(stage_enable)} entries; network has '
                f'{len(net.stages)} stages')
        gammas = OrderedDict()  # type: OrderedDict[str, np.ndarray]
        adapters = OrderedDict()  # type: OrderedDict[str, AdapterParams]
        block_layers = OrderedDict()  # type: OrderedDict[str, List[str]]
        for i, (stage, block) in enumerate(net.blocks()):
            if not stage_enable[stage - 1]:
                continue
            block_layers[block.name] = [bn.name for bn in block.bn_layers()]
            for bn in block.bn_layers():
                gammas[bn.name] = bn.gamma.data
            adapters[block.name] = init_adapter(
                block.channels, seed, name=f'{block.name}.adapter',
                alpha_init=alpha_init, key=i)
        if not block_layers:
            raise errors.ConfigError('No stage is enabled for buffering')
        log.debug(f'Attached buffers to {len(block_layers)} blocks '
                  f'({sum(g.size for g in gammas.values())} masked channels)')
        return cls(init_scores(gammas, rho_target, lambda_s, r),
                   AdditiveBuffer(adapters, lambda_a, k),
                   block_layers, subtractive_on, additive_on, coupling_on)

    @property
    def masked_layers(self) -> List[str]:
        return self.mask_state.layers

    def output_layer(self, block: str) -> str:
        return self.block_layers[block][-1]

    def parameter_groups(self) -> Dict[str, List[Tensor]]:
        return {'scores': self.mask_state.parameters(),
                'adapter': self.additive.parameters()}

    def snapshot(self, straight_through: bool = True) -> MaskSnapshot:
        return self.mask_state.snapshot(straight_through)

    def bind(self, snapshot: MaskSnapshot) -> "BoundBuffers":
        return BoundBuffers(self, snapshot)

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()  # type: OrderedDict[str, np.ndarray]
        for name, value in self.mask_state.arrays().items():
            out[f'score/{name}'] = value
        for name, p in self.additive.named_parameters().items():
            out[f'adapter/{name}'] = p.data
        return out

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.mask_state.load_arrays(
            {k[len('score/'):]: v for k, v in arrays.items() if k.startswith('score/')})
        for name, p in self.additive.named_parameters().items():
            key = f'adapter/{name}'
            if key not in arrays:
                raise errors.ConfigError(f'Missing adapter weights {name}')
            value = np.array(arrays[key], dtype=np.float64)
            if value.shape != p.shape:
                raise errors.ConfigError(
                    f'Adapter weights {name} have shape {value.shape}, '
                    f'expected {p.shape}')
            p.data = value


class BoundBuffers(BufferHooks):
    """Buffers bound to one mask snapshot, as seen by a single forward."""

    def __init__(self, buffer: CDBuffer, snapshot: MaskSnapshot) -> None:
        self.buffer = buffer
        self.snapshot = snapshot

    def mask(self, layer: str) -> Optional[Tensor]:
        buf = self.buffer
        if not buf.subtractive_on or layer not in buf.mask_state.scores:
            return None
        return buf.mask_state.mask(layer, self.snapshot)

    def adapter(self, block: str, x: Tensor) -> Optional[Tensor]:
        buf = self.buffer
        if not buf.additive_on or block not in buf.additive:
            return None
        m_inv = None
        if buf.coupling_on:
            scores = buf.mask_state.scores[buf.output_layer(block)]
            m_inv = buf.additive.modulation(scores, self.snapshot.tau)
        return buf.additive.forward(block, x, m_inv)
