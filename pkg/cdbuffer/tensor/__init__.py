"""Deterministic float64 reverse-mode autodiff.

Example:
    >>> from cdbuffer.tensor import Tensor, Tape, backward, ops
    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape():
    ...     loss = ops.sum(ops.square(x))
    ...     backward(loss)
    >>> x.grad
    array([2., 4.])
"""

from cdbuffer.tensor import nn, ops
from cdbuffer.tensor.gradcheck import grad_check
from cdbuffer.tensor.nn import batch_norm, conv2d
from cdbuffer.tensor.ops import l1_mean_distance, stop_gradient
from cdbuffer.tensor.tensor import (Tape, Tensor, backward, current_tape,
                                    is_grad_enabled, no_grad)
