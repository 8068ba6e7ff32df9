"""Network primitives: convolution, batch normalization, linear, loss."""

from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import special

from cdbuffer import errors
from cdbuffer.tensor.tensor import Tensor, make_result

SUPPORTED_KERNELS = (1, 3)


# --- Convolution -------------------------------------------------------------
def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride,
                                  j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def conv2d(
    x: Tensor,
    weight: Tensor,
    stride: int = 1,
    padding: int = 0
) -> Tensor:
    """2D cross-correlation, no bias.

    Args:
        x (Tensor): Input of shape [N, C, H, W].
        weight (Tensor): Kernel of shape [O, C, kh, kw], kh and kw in {1, 3}.
        stride (int): Step between output positions. Defaults to 1.
        padding (int): Zero padding on every spatial border. Defaults to 0.

    Returns:
        Tensor of shape [N, O, H', W'].
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise errors.DimensionError(
            f'conv2d expects 4D input and weight, got {x.shape} and '
            f'{weight.shape}'
        )
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise errors.DimensionError(
            f'conv2d: input axis 1 (channels) = {c} but weight axis 1 = {wc}'
        )
    if kh not in SUPPORTED_KERNELS or kw not in SUPPORTED_KERNELS:
        raise errors.DimensionError(
            f'conv2d: kernel axes 2,3 = ({kh}, {kw}); supported sizes are '
            f'{SUPPORTED_KERNELS}'
        )
    if stride < 1 or padding < 0:
        raise ValueError(f'Invalid stride={stride} / padding={padding}')
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise errors.DimensionError(
            f'conv2d: spatial axes 2,3 ({h}, {w}) too small for kernel '
            f'({kh}, {kw}) with padding {padding}'
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding),
                         (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(o, -1)
    out = np.matmul(wmat, cols).reshape(n, o, ho, wo)

    def backward(g):
        gr = g.reshape(n, o, ho * wo)
        gw = np.tensordot(gr, cols, axes=([0, 2], [0, 2])).reshape(
            weight.shape)
        gcols = np.matmul(wmat.T, gr).reshape(n, c, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride,
                    j:j + stride * wo:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        return gx, gw

    return make_result(out, (x, weight), backward, 'conv2d')


# --- Batch normalization -----------------------------------------------------
class BatchNormOutput(NamedTuple):
    y: Tensor
    batch_mean: Tensor
    batch_var: Tensor


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    training: bool = False,
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
) -> BatchNormOutput:
    """Per-channel normalization over (N, H, W) followed by (gamma, beta).

    Train mode normalizes with the (biased) batch statistics; eval mode
    uses the supplied running statistics. Batch statistics are returned
    in both modes. Running statistics are never updated here.
    """
    if x.ndim != 4:
        raise errors.DimensionError(f'batch_norm expects [N,C,H,W], got {x.shape}')
    n, c, h, w = x.shape
    for name, p in (('gamma', gamma), ('beta', beta)):
        if p.shape != (c,):
            raise errors.DimensionError(
                f'batch_norm: {name} shape {p.shape} does not match input '
                f'axis 1 (channels) = {c}'
            )
    if eps <= 0:
        raise ValueError('batch_norm eps must be positive')
    count = n * h * w
    if training and count < 2:
        raise errors.DegenerateBatchError(count)
    if count == 0:
        raise errors.DimensionError('batch_norm on an empty batch')
    axes = (0, 2, 3)
    bmean = x.data.mean(axis=axes)
    bvar = x.data.var(axis=axes)
    if training:
        mean, var = bmean, bvar
    else:
        if running_mean is None or running_var is None:
            raise errors.ConfigError('Eval-mode batch_norm needs running statistics')
        mean, var = np.asarray(running_mean), np.asarray(running_var)
    std = np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) / std.reshape(1, c, 1, 1)
    g_ = gamma.data.reshape(1, c, 1, 1)
    y = g_ * xhat + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * g_
        if training:
            dx = (dxhat
                  - dxhat.mean(axis=axes, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
            dx = dx / std.reshape(1, c, 1, 1)
        else:
            dx = dxhat / std.reshape(1, c, 1, 1)
        return dx, dgamma, dbeta

    out = make_result(y, (x, gamma, beta), backward, 'batch_norm')
    return BatchNormOutput(out, Tensor(bmean), Tensor(bvar))


# --- Dense layers & losses ---------------------------------------------------
def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight.T + bias for x [N, F], weight [K, F], bias [K]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise errors.DimensionError(
            f'linear: input {x.shape} incompatible with weight {weight.shape} '
            '(axis 1 must match)'
        )
    if bias.shape != (weight.shape[0],):
        raise errors.DimensionError(
            f'linear: bias {bias.shape} does not match weight axis 0 '
            f'({weight.shape[0]})'
        )
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return make_result(out, (x, weight, bias), backward, 'linear')


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise errors.DimensionError(
            f'cross_entropy: logits {logits.shape} vs labels {labels.shape}'
        )
    n = logits.shape[0]
    if n == 0:
        raise errors.DimensionError('cross_entropy on an empty batch')
    logp = special.log_softmax(logits.data, axis=1)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (g * grad / n,)

    return make_result(np.array(loss), (logits,), backward, 'cross_entropy')


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C]."""
    from cdbuffer.tensor import ops
    return ops.mean(x, axes=(2, 3))
