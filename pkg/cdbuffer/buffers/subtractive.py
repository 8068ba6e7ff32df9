"""Channel suppression on BN outputs.

Every masked BN layer owns a learnable score vector. A single threshold
is taken from the pooled score magnitudes of all masked layers; channels
below it are zeroed in the forward pass while gradients reach the scores
through a sigmoid relaxation.
"""

from collections import OrderedDict
from typing import List, Mapping, NamedTuple, Optional, Union

import numpy as np

from cdbuffer import errors
from cdbuffer.tensor import Tensor, ops
from cdbuffer.util import log

ArrayLike = Union[Tensor, np.ndarray]


def _values(x: ArrayLike) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


class MaskSnapshot(NamedTuple):
    """Threshold and hard masks fixed for one forward pass.

    With ``straight_through`` the forward uses hard masks while gradients
    follow the soft masks; without it the masks are plain constants.
    """

    tau: float
    hard: "OrderedDict[str, np.ndarray]"
    straight_through: bool = True

    def suppressed(self) -> int:
        return int(sum(np.count_nonzero(m == 0) for m in self.hard.values()))


class MaskState:
    """Mask scores of every masked layer plus the global settings.

    Args:
        scores (OrderedDict): Layer name -> learnable score Tensor [C].
        rho_target (float): Network-wide suppression ratio in [0, 1).
        lambda_s (float): Temperature of the soft mask.
        r (float): Reactivation probability of a suppressed channel.
    """

    def __init__(
        self,
        scores: "OrderedDict[str, Tensor]",
        rho_target: float = 0.05,
        lambda_s: float = 0.05,
        r: float = 0.05
    ) -> None:
        if not 0 <= rho_target < 1:
            raise errors.ConfigError(f'rho_target must be in [0, 1), got {rho_target}')
        if not lambda_s > 0:
            raise errors.ConfigError(f'lambda_s must be positive, got {lambda_s}')
        if not 0 <= r <= 1:
            raise errors.ConfigError(f'r must be in [0, 1], got {r}')
        self.scores = scores
        self.rho_target = float(rho_target)
        self.lambda_s = float(lambda_s)
        self.r = float(r)

    def __repr__(self) -> str:
        return (f'MaskState(layers={len(self.scores)}, channels={self.total}, '
                f'rho_target={self.rho_target}, lambda_s={self.lambda_s}, r={self.r})')

    @property
    def layers(self) -> List[str]:
        return list(self.scores.keys())

    @property
    def total(self) -> int:
        return int(sum(s.size for s in self.scores.values()))

    def parameters(self) -> List[Tensor]:
        return list(self.scores.values())

    def pooled(self) -> np.ndarray:
        """Score magnitudes of every masked channel, concatenated."""
        if not self.scores:
            return np.zeros(0)
        return np.concatenate([np.abs(s.data) for s in self.scores.values()])

    def threshold(self) -> float:
        return compute_threshold(self.pooled(), self.rho_target)

    def snapshot(self, straight_through: bool = True) -> MaskSnapshot:
        tau = self.threshold()
        hard = OrderedDict(
            (name, hard_mask(s, tau)) for name, s in self.scores.items())
        return MaskSnapshot(tau, hard, straight_through)

    def mask(self, layer: str, snapshot: MaskSnapshot) -> Tensor:
        """Mask Tensor of ``layer`` for a forward under ``snapshot``."""
        if not snapshot.straight_through:
            return Tensor(snapshot.hard[layer])
        return ste_mask(self.scores[layer], snapshot.tau, self.lambda_s,
                        hard=snapshot.hard[layer])

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.scores.items())

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, s in self.scores.items():
            if name not in arrays:
                raise errors.ConfigError(f'Missing mask scores for {name}')
            value = np.array(arrays[name], dtype=np.float64)
            if value.shape != s.shape:
                raise errors.ConfigError(
                    f'Mask scores for {name} have shape {value.shape}, '
                    f'expected {s.shape}')
            s.data = value


def init_scores(
    gammas: Mapping[str, ArrayLike],
    rho_target: float = 0.05,
    lambda_s: float = 0.05,
    r: float = 0.05
) -> MaskState:
    """Scores start at the BN scale magnitudes, s = |gamma|."""
    scores = OrderedDict(
        (name, Tensor(np.abs(_values(g)), requires_grad=True,
                      name=f'{name}.score'))
        for name, g in gammas.items()
    )  # type: OrderedDict[str, Tensor]
    return MaskState(scores, rho_target, lambda_s, r)


def compute_threshold(pooled: np.ndarray, rho_target: float) -> float:
    """Smallest score kept active so that floor(rho * n) entries fall below.

    Entries tied with the threshold stay active, so at most that many
    channels are suppressed.
    """
    pooled = np.asarray(pooled, dtype=np.float64).reshape(-1)
    if not pooled.size:
        raise errors.ConfigError('Cannot compute a threshold over zero scores')
    if not 0 <= rho_target < 1:
        raise errors.ConfigError(f'rho_target must be in [0, 1), got {rho_target}')
    k = int(np.floor(rho_target * pooled.size))
    return float(np.sort(np.abs(pooled))[k])


def hard_mask(s: ArrayLike, tau: float) -> np.ndarray:
    return (np.abs(_values(s)) >= tau).astype(np.float64)


def soft_mask(s: Tensor, tau: float, temperature: float) -> Tensor:
    """sigmoid((|s| - tau) / temperature)"""
    return ops.sigmoid(ops.scale(ops.add_scalar(ops.abs(s), -tau), 1.0 / temperature))


def ste_mask(
    s: Tensor,
    tau: float,
    lambda_s: float,
    hard: Optional[np.ndarray] = None
) -> Tensor:
    """Hard mask in the forward pass, soft-mask gradient in the backward.

    Computed as m_hard + (m_soft - stop_gradient(m_soft)).
    """
    if not lambda_s > 0:
        raise errors.ConfigError(f'lambda_s must be positive, got {lambda_s}')
    if hard is None:
        hard = hard_mask(s, tau)
    soft = soft_mask(s, tau, lambda_s)
    return ops.add(Tensor(hard), ops.sub(soft, ops.stop_gradient(soft)))


def apply_subtractive(f_bn: Tensor, m: Tensor) -> Tensor:
    if f_bn.ndim != 4 or m.shape != (f_bn.shape[1],):
        raise errors.DimensionError(
            f'apply_subtractive: mask {m.shape} does not match axis 1 of '
            f'{f_bn.shape}')
    return ops.mul(f_bn, m)


def mask_loss(
    d_all: Mapping[str, ArrayLike],
    s_all: Mapping[str, Tensor]
) -> Tensor:
    """Discrepancy-weighted L1 on the scores, averaged over channels then layers."""
    if not s_all:
        return Tensor(0.0)
    terms = []
    for name, s in s_all.items():
        if name not in d_all:
            raise errors.ConfigError(f'No discrepancy for masked layer {name}')
        d = Tensor(_values(d_all[name]))
        if d.shape != s.shape:
            raise errors.DimensionError(
                f'mask_loss: discrepancy {d.shape} vs scores {s.shape} for {name}')
        terms.append(ops.mean(ops.abs(ops.mul(d, s))))
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return ops.scale(total, 1.0 / len(terms))


def reactivate(
    state: MaskState,
    gammas: Mapping[str, ArrayLike],
    rng: np.random.Generator,
    hard: Optional[Mapping[str, np.ndarray]] = None
) -> int:
    """Reset each suppressed score to |gamma| with probability ``r``.

    ``hard`` gives the masks of the step's forward; without it the masks
    under the current threshold are used. Returns the number of channels
    reactivated.
    """
    if hard is None:
        hard = state.snapshot().hard
    count = 0
    for name, s in state.scores.items():
        off = np.flatnonzero(hard[name] == 0)
        if not off.size:
            continue
        chosen = off[rng.random(off.size) < state.r]
        if not chosen.size:
            continue
        data = s.data.copy()
        data[chosen] = np.abs(_values(gammas[name]))[chosen]
        s.data = data
        count += int(chosen.size)
    if count:
        log.debug(f'Reactivated {count} channels')
    return count
