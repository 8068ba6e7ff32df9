"""Residual adapters whose strength follows the inverse of the mask scores."""

from typing import Dict, List, Optional

import numpy as np

from cdbuffer import errors
from cdbuffer.buffers.subtractive import soft_mask
from cdbuffer.tensor import Tensor, nn, ops
from cdbuffer.util import events, log, rng as make_rng

STREAM_ADAPTER = 13
ALPHA_INIT = 1e-2


class AdapterParams:
    """Parallel 1x1 and 3x3 convolutions plus a per-channel scale."""

    def __init__(self, name: str, w1: Tensor, w3: Tensor, alpha: Tensor) -> None:
        c = alpha.shape[0]
        if w1.shape != (c, c, 1, 1) or w3.shape != (c, c, 3, 3):
            raise errors.DimensionError(
                f'Adapter {name}: weights {w1.shape}, {w3.shape} do not fit '
                f'{c} channels')
        self.name = name
        self.w1 = w1
        self.w3 = w3
        self.alpha = alpha

    def __repr__(self) -> str:
        return f'AdapterParams({self.name!r}, channels={self.channels})'

    @property
    def channels(self) -> int:
        return self.alpha.shape[0]

    def parameters(self) -> Dict[str, Tensor]:
        return {t.name: t for t in (self.w1, self.w3, self.alpha)}


def init_adapter(
    channels: int,
    seed: int,
    name: str = 'adapter',
    alpha_init: float = ALPHA_INIT,
    key: int = 0
) -> AdapterParams:
    """Uniform +-1/sqrt(fan_in) conv weights and a constant small scale."""
    rng = make_rng(seed, STREAM_ADAPTER, key)
    b1 = 1.0 / np.sqrt(channels)
    b3 = 1.0 / np.sqrt(channels * 9)
    w1 = rng.uniform(-b1, b1, size=(channels, channels, 1, 1))
    w3 = rng.uniform(-b3, b3, size=(channels, channels, 3, 3))
    return AdapterParams(
        name,
        Tensor(w1, requires_grad=True, name=f'{name}.w1'),
        Tensor(w3, requires_grad=True, name=f'{name}.w3'),
        Tensor(np.full(channels, float(alpha_init)), requires_grad=True,
               name=f'{name}.alpha'))


def adapter_forward(f: Tensor, params: AdapterParams) -> Tensor:
    """(conv1x1(F) + conv3x3(F)) / 2, scaled per channel by alpha."""
    if f.ndim != 4 or f.shape[1] != params.channels:
        raise errors.DimensionError(
            f'Adapter {params.name} expects {params.channels} channels on '
            f'axis 1, got input {f.shape}')
    both = ops.add(nn.conv2d(f, params.w1, stride=1, padding=0),
                   nn.conv2d(f, params.w3, stride=1, padding=1))
    return ops.mul(ops.scale(both, 0.5), params.alpha)


def inverse_soft_mask(s: Tensor, tau: float, lambda_a: float, k: float) -> Tensor:
    """k * minmax(1 - sigmoid((|s| - tau) / lambda_a)), in [0, k].

    All-equal inputs map to k / 2.
    """
    if not lambda_a > 0 or not k > 0:
        raise errors.ConfigError(
            f'lambda_a and k must be positive (got {lambda_a}, {k})')
    raw = ops.add_scalar(ops.neg(soft_mask(s, tau, lambda_a)), 1.0)
    if np.ptp(raw.data) <= ops.MINMAX_EPS:
        events.hit('flat_inverse_mask')
        log.debug('Inverse mask input is flat; using the midpoint')
    return ops.scale(ops.minmax(raw), k)


def apply_additive(f_add: Tensor, m_inv: Tensor) -> Tensor:
    if f_add.ndim != 4 or m_inv.shape != (f_add.shape[1],):
        raise errors.DimensionError(
            f'apply_additive: inverse mask {m_inv.shape} does not match '
            f'axis 1 of {f_add.shape}')
    return ops.mul(f_add, m_inv)


class AdditiveBuffer:
    """Adapters keyed by block name, plus the modulation settings.

    Args:
        adapters (dict): Block name -> :class:`AdapterParams`.
        lambda_a (float): Temperature of the inverse soft mask.
        k (float): Range of the inverse mask.
    """

    def __init__(self, adapters: Dict[str, AdapterParams],
                 lambda_a: float = 0.1, k: float = 10.0) -> None:
        if not lambda_a > 0 or not k > 0:
            raise errors.ConfigError(
                f'lambda_a and k must be positive (got {lambda_a}, {k})')
        self.adapters = adapters
        self.lambda_a = float(lambda_a)
        self.k = float(k)

    def __contains__(self, block: str) -> bool:
        return block in self.adapters

    def __getitem__(self, block: str) -> AdapterParams:
        return self.adapters[block]

    def parameters(self) -> List[Tensor]:
        return [p for a in self.adapters.values() for p in a.parameters().values()]

    def named_parameters(self) -> Dict[str, Tensor]:
        out = {}  # type: Dict[str, Tensor]
        for a in self.adapters.values():
            out.update(a.parameters())
        return out

    def modulation(self, scores: Tensor, tau: float) -> Tensor:
        return inverse_soft_mask(scores, tau, self.lambda_a, self.k)

    def forward(self, block: str, x: Tensor, m_inv: Optional[Tensor]) -> Tensor:
        f_add = adapter_forward(x, self.adapters[block])
        if m_inv is None:
            return f_add
        return apply_additive(f_add, m_inv)
