"""Central finite-difference verification of tape gradients."""

from typing import Callable, Dict, Sequence

import numpy as np

from cdbuffer.tensor.tensor import Tape, Tensor, backward, no_grad


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    report: Dict[str, float] = None
) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` must be deterministic and read the parameters' current values
    each time it is called. Errors are
    ``|ad - fd| / max(|fd|, 1e-8)``, maximized over every element of
    every parameter. When ``report`` is given it receives the per
    parameter maxima (keyed by tensor name or position).
    """
    for p in params:
        p.zero_grad()
    with Tape():
        loss = f()
        backward(loss)
    analytic = [
        np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params
    ]
    worst = 0.0
    for pos, (p, ad) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError('grad_check needs contiguous parameter storage')
        param_worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                f_plus = f().item()
                flat[i] = orig - h
                f_minus = f().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2 * h)
            err = abs(ad.reshape(-1)[i] - fd) / max(abs(fd), 1e-8)
            param_worst = max(param_worst, err)
        if report is not None:
            report[p.name or str(pos)] = param_worst
        worst = max(worst, param_worst)
    for p in params:
        p.zero_grad()
    return worst
