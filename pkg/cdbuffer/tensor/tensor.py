"""Tensor value type and the operation tape behind reverse-mode autodiff."""

import threading
from contextlib import contextmanager
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from cdbuffer import errors

# Backward functions map the output gradient to one gradient per input
# (None where the input receives nothing).
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()


def _stack() -> List["Tape"]:
    if not hasattr(_state, 'stack'):
        _state.stack = []
        _state.grad_enabled = True
    return _state.stack


def current_tape() -> Optional["Tape"]:
    """Innermost active tape, or None outside any `with Tape()` block."""
    stack = _stack()
    return stack[-1] if stack else None


def is_grad_enabled() -> bool:
    _stack()
    return _state.grad_enabled


@contextmanager
def no_grad():
    """Disable recording; results never require grad."""
    _stack()
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Dense float64 array with optional gradient tracking.

    Tensors produced by recorded operations keep a link (``node``) to the
    tape entry that created them. Leaf tensors (``node is None``) with
    ``requires_grad`` accumulate gradients into ``grad`` during backward.
    """

    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None
    ) -> None:
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None  # type: Optional[np.ndarray]
        self.node = None  # type: Optional[Tuple[Tape, int]]
        self.name = name

    # --- Properties ---------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        grad = ', requires_grad=True' if self.requires_grad else ''
        name = '' if self.name is None else f', name={self.name!r}'
        return f'Tensor(shape={self.shape}{grad}{name})'

    # --- Gradient bookkeeping -----------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.shape:
            raise errors.DimensionError(
                f'Gradient shape {g.shape} does not match tensor shape '
                f'{self.shape}'
            )
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        """Independent leaf copy keeping ``requires_grad``."""
        return Tensor(self.data.copy(), requires_grad=self.requires_grad,
                      name=self.name)

    # --- Operator sugar -----------------------------------------------------
    def __add__(self, other):
        from cdbuffer.tensor import ops
        if isinstance(other, (int, float)):
            return ops.add_scalar(self, float(other))
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from cdbuffer.tensor import ops
        if isinstance(other, (int, float)):
            return ops.add_scalar(self, -float(other))
        return ops.sub(self, other)

    def __rsub__(self, other):
        from cdbuffer.tensor import ops
        return ops.add_scalar(ops.neg(self), float(other))

    def __mul__(self, other):
        from cdbuffer.tensor import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from cdbuffer.tensor import ops
        return ops.neg(self)


def make_result(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: BackwardFn,
    op: str
) -> Tensor:
    """Wrap an operation result and record it when any input needs grad.

    Nothing is recorded outside a tape, so the result is a constant there.
    """
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = (tape, tape.record(op, inputs, backward_fn))
    return out


class _Node:
    __slots__ = ('index', 'op', 'inputs', 'backward_fn')

    def __init__(self, index, op, inputs, backward_fn):
        self.index = index
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as operations execute, so every node's inputs
    precede it. Used as a context manager, a tape becomes the recording
    target for the enclosed block.
    """

    def __init__(self) -> None:
        self.nodes = []  # type: List[_Node]

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError('Tape stack corrupted: unbalanced tapes')
        stack.pop()

    def record(
        self,
        op: str,
        inputs: Sequence[Tensor],
        backward_fn: BackwardFn
    ) -> int:
        index = len(self.nodes)
        self.nodes.append(_Node(index, op, inputs, backward_fn))
        return index

    def reset(self) -> None:
        self.nodes = []

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(.) to every reachable leaf."""
        _, start = loss.node  # type: ignore
        grads = {start: np.ones(loss.shape)}
        for node in reversed(self.nodes[:start + 1]):
            g = grads.pop(node.index, None)
            if g is None:
                continue
            input_grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, input_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.node is not None and t.node[0] is self:
                    idx = t.node[1]
                    grads[idx] = grads[idx] + gi if idx in grads else gi
                else:
                    t.accumulate(np.asarray(gi, dtype=np.float64))


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss on all contributing leaves.

    Repeated calls without ``zero_grad`` accumulate.
    """
    if not isinstance(loss, Tensor):
        raise TypeError(f'Expected Tensor, got {type(loss).__name__}')
    if loss.ndim != 0:
        raise errors.RankError(
            f'backward() needs a scalar loss, got shape {loss.shape}'
        )
    if loss.node is None:
        loss.accumulate(np.ones(()))
        return
    tape, _ = loss.node
    tape.backward(loss)
