"""Elementwise, reduction and masking primitives.

Binary operations accept equal shapes, or a length-C vector against a
tensor whose axis 1 has size C (per-channel broadcasting). Nothing else
broadcasts.
"""

from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from cdbuffer import errors
from cdbuffer.tensor.tensor import Tensor, make_result

Axes = Optional[Union[int, Sequence[int]]]
MINMAX_EPS = 1e-12


# --- Broadcasting helpers ----------------------------------------------------
def _check_tensor(x, op: str) -> Tensor:
    if not isinstance(x, Tensor):
        raise TypeError(f'{op}: expected Tensor, got {type(x).__name__}')
    return x


def _pair_mode(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return 'same'
    if b.ndim == 1 and a.ndim >= 2 and a.shape[1] == b.shape[0]:
        return 'b_channel'
    if a.ndim == 1 and b.ndim >= 2 and b.shape[1] == a.shape[0]:
        return 'a_channel'
    if a.ndim != b.ndim:
        raise errors.DimensionError(
            f'{op}: rank mismatch, {a.shape} vs {b.shape} (only per-channel '
            f'[C] against axis 1 broadcasts)'
        )
    bad = [i for i, (p, q) in enumerate(zip(a.shape, b.shape)) if p != q]
    raise errors.DimensionError(
        f'{op}: shape mismatch on axes {bad}: {a.shape} vs {b.shape}'
    )


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _channel_reduce(g: np.ndarray) -> np.ndarray:
    return g.sum(axis=tuple(i for i in range(g.ndim) if i != 1))


def _operands(a: Tensor, b: Tensor, mode: str) -> Tuple[np.ndarray, np.ndarray]:
    if mode == 'b_channel':
        return a.data, _channel_view(b.data, a.ndim)
    if mode == 'a_channel':
        return _channel_view(a.data, b.ndim), b.data
    return a.data, b.data


def _grad_for(g: np.ndarray, mode: str, side: str) -> np.ndarray:
    if (mode, side) in (('b_channel', 'b'), ('a_channel', 'a')):
        return _channel_reduce(g)
    return g


# --- Binary operations -------------------------------------------------------
def add(a: Tensor, b: Tensor) -> Tensor:
    _check_tensor(a, 'add')
    _check_tensor(b, 'add')
    mode = _pair_mode(a, b, 'add')
    x, y = _operands(a, b, mode)

    def backward(g):
        return _grad_for(g, mode, 'a'), _grad_for(g, mode, 'b')

    return make_result(x + y, (a, b), backward, 'add')


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_tensor(a, 'sub')
    _check_tensor(b, 'sub')
    mode = _pair_mode(a, b, 'sub')
    x, y = _operands(a, b, mode)

    def backward(g):
        return _grad_for(g, mode, 'a'), _grad_for(-g, mode, 'b')

    return make_result(x - y, (a, b), backward, 'sub')


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_tensor(a, 'mul')
    _check_tensor(b, 'mul')
    mode = _pair_mode(a, b, 'mul')
    x, y = _operands(a, b, mode)

    def backward(g):
        return _grad_for(g * y, mode, 'a'), _grad_for(g * x, mode, 'b')

    return make_result(x * y, (a, b), backward, 'mul')


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result(a.data * c, (a,), lambda g: (g * c,), 'scale')


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result(a.data + c, (a,), lambda g: (g,), 'add_scalar')


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), 'neg')


# --- Unary operations --------------------------------------------------------
def abs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return make_result(np.abs(a.data), (a,), lambda g: (g * sign,), 'abs')


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)
    return make_result(
        out, (a,), lambda g: (g * out * (1.0 - out),), 'sigmoid'
    )


def relu(a: Tensor) -> Tensor:
    active = a.data > 0
    return make_result(
        np.where(active, a.data, 0.0), (a,), lambda g: (g * active,), 'relu'
    )


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError('sqrt of negative value')
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / np.maximum(out, 1e-12),)

    return make_result(out, (a,), backward, 'sqrt')


def square(a: Tensor) -> Tensor:
    x = a.data
    return make_result(x * x, (a,), lambda g: (2.0 * g * x,), 'square')


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.shape
    return make_result(
        a.data.reshape(tuple(shape)), (a,),
        lambda g: (g.reshape(orig),), 'reshape'
    )


def stop_gradient(a: Tensor) -> Tensor:
    """Same forward value, no gradient flow back into ``a``."""
    out = Tensor(a.data)
    out.data = a.data  # share storage; values are never mutated in place
    return out


# --- Reductions --------------------------------------------------------------
def _norm_axes(a: Tensor, axes: Axes) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(a.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -a.ndim <= ax < a.ndim:
            raise errors.DimensionError(
                f'Reduction axis {ax} out of range for shape {a.shape}'
            )
        out.append(ax % a.ndim)
    return tuple(sorted(set(out)))


def sum(a: Tensor, axes: Axes = None) -> Tensor:
    ax = _norm_axes(a, axes)
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return make_result(a.data.sum(axis=ax), (a,), backward, 'sum')


def mean(a: Tensor, axes: Axes = None) -> Tensor:
    ax = _norm_axes(a, axes)
    count = int(np.prod([a.shape[i] for i in ax])) if ax else 1
    if count == 0:
        raise errors.DimensionError(f'mean over empty axes {ax} of {a.shape}')
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape) / count,)

    return make_result(a.data.sum(axis=ax) / count, (a,), backward, 'mean')


def l1_mean_distance(a: Tensor, b: Tensor) -> Tensor:
    """mean(|a - b|) over every element."""
    if a.shape != b.shape:
        _pair_mode(a, b, 'l1_mean_distance')
        raise errors.DimensionError(
            f'l1_mean_distance: shapes differ, {a.shape} vs {b.shape}'
        )
    return mean(abs(sub(a, b)))


# --- Normalization -----------------------------------------------------------
def minmax(v: Tensor) -> Tensor:
    """Min-max rescaling of a vector to [0, 1].

    When every entry is equal the result is 0.5 everywhere with zero
    gradient.
    """
    if v.ndim != 1:
        raise errors.DimensionError(f'minmax expects a vector, got {v.shape}')
    x = v.data
    lo, hi = int(np.argmin(x)), int(np.argmax(x))
    span = x[hi] - x[lo]
    if not span > MINMAX_EPS:
        return make_result(
            np.full(x.shape, 0.5), (v,),
            lambda g: (np.zeros_like(x),), 'minmax'
        )
    y = (x - x[lo]) / span

    def backward(g):
        gv = g / span
        gv[lo] += np.sum(g * (y - 1.0)) / span
        gv[hi] -= np.sum(g * y) / span
        return (gv,)

    return make_result(y, (v,), backward, 'minmax')
