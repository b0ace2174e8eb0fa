"""
Dense float32 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation is a ``Function`` subclass with a ``forward``
working on raw numpy arrays and a ``backward`` returning one gradient array
per input. Applying a function to inputs that require gradients records it on
the graph; ``ComputationTape`` orders the recorded functions reachable from a
loss and replays their backward rules in reverse recording order.
"""

import itertools
import threading
from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

DTYPE = np.float32

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

_sequence = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Operands whose shapes cannot be combined."""


class MissingGradientError(RuntimeError):
    """A trainable parameter reached the optimizer without a gradient."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording anything on the graph (inference, finite differences)."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


def as_tensor(value: ArrayLike) -> "Tensor":
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """
    Sum out the axes numpy broadcasting added so ``grad`` matches ``shape``.

    Args:
        grad: Gradient with the broadcast result's shape
        shape: Shape of the operand that was broadcast

    Returns:
        Gradient with exactly ``shape``
    """
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a} and {b}")


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement ``forward`` on numpy arrays and ``backward`` mapping
    the gradient of the output to one gradient (or ``None``) per input.
    """

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs
        self.seq = next(_sequence)

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__}.forward")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__}.backward")

    @classmethod
    def apply(cls, *inputs: ArrayLike, **kwargs) -> "Tensor":
        tensors = [as_tensor(x) for x in inputs]
        fn = cls(*tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = grad_enabled() and any(t.requires_grad for t in tensors)
        result = Tensor(out, requires_grad=requires_grad)
        if requires_grad:
            result.creator = fn
        return result


class Tensor:
    """
    A float32 array plus gradient bookkeeping.

    Leaves created with ``requires_grad=True`` accumulate ``grad`` during
    backward; intermediate results only carry a reference to the function
    that produced them.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.creator: Optional[Function] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != self.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match tensor shape {self.shape}")
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Backpropagate from this tensor (ones when ``grad`` is omitted)."""
        ComputationTape.from_output(self).backward(self, grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}{flag})"

    # arithmetic
    def __add__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return Sub.apply(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return Sub.apply(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(other, self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return MatMul.apply(self, other)

    def __getitem__(self, key) -> "Tensor":
        return Index.apply(self, key=key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> "Tensor":
        return Transpose.apply(self, axes=axes or None)


class ComputationTape:
    """
    The recorded operations reachable from one output, in recording order.

    Backward replays the nodes in reverse order; each node is visited exactly
    once and receives the sum of the gradients flowing into its output.
    """

    def __init__(self, nodes: List[Function]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_output(cls, output: Tensor) -> "ComputationTape":
        seen: Dict[int, Function] = {}
        stack = [output.creator] if output.creator is not None else []
        while stack:
            fn = stack.pop()
            if id(fn) in seen:
                continue
            seen[id(fn)] = fn
            for t in fn.inputs:
                if t.creator is not None and id(t.creator) not in seen:
                    stack.append(t.creator)
        return cls(sorted(seen.values(), key=lambda fn: fn.seq))

    def backward(self, output: Tensor, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            grad = np.ones(output.shape, dtype=DTYPE)
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != output.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} does not match output shape {output.shape}")
        if output.creator is None:
            output.accumulate_grad(grad)
            return

        pending: Dict[int, np.ndarray] = {id(output.creator): grad}
        for fn in reversed(self.nodes):
            g = pending.pop(id(fn), None)
            if g is None:
                continue
            for t, gi in zip(fn.inputs, fn.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t.creator is not None:
                    key = id(t.creator)
                    pending[key] = pending[key] + gi if key in pending else gi
                else:
                    t.accumulate_grad(gi)


class Add(Function):
    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape)
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)


class Sub(Function):
    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape)
        return a - b

    def backward(self, grad):
        a, b = self.inputs
        return unbroadcast(grad, a.shape), unbroadcast(-grad, b.shape)


class Mul(Function):
    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape)
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return unbroadcast(grad * b.data, a.shape), unbroadcast(grad * a.data, b.shape)


class Div(Function):
    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape)
        return a / b

    def backward(self, grad):
        a, b = self.inputs
        ga = grad / b.data
        gb = -grad * a.data / (b.data * b.data)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class MatMul(Function):
    """Matrix product over the last two axes, broadcasting leading axes."""

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul shapes {a.shape} and {b.shape} are not conformant")
        broadcast_shape(a.shape[:-2], b.shape[:-2])
        return a @ b

    def backward(self, grad):
        a, b = self.inputs
        ga = grad @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ grad
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.axis = axis
        self.keepdims = keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        (a,) = self.inputs
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, a.shape).astype(DTYPE),)


class Mean(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.axis = axis
        self.keepdims = keepdims
        out = np.mean(a, axis=axis, keepdims=keepdims)
        self.count = a.size // max(np.size(out), 1)
        return out

    def backward(self, grad):
        (a,) = self.inputs
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, a.shape).astype(DTYPE),)


class Reshape(Function):
    def forward(self, a, shape):
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}")

    def backward(self, grad):
        return (grad.reshape(self.inputs[0].shape),)


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Index(Function):
    """Basic indexing (integers and slices); gradients scatter back into zeros."""

    def forward(self, a, key):
        self.key = key
        return np.array(a[key])

    def backward(self, grad):
        full = np.zeros(self.inputs[0].shape, dtype=DTYPE)
        full[self.key] += grad
        return (full,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.sizes = [x.shape[axis] for x in arrays]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError:
            raise ShapeError(f"cannot concatenate shapes {[x.shape for x in arrays]} along axis {axis}")

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


class Sin(Function):
    def forward(self, a, omega=1.0):
        self.omega = omega
        return np.sin(omega * a)

    def backward(self, grad):
        (a,) = self.inputs
        return (grad * self.omega * np.cos(self.omega * a.data),)


class Cos(Function):
    def forward(self, a):
        return np.cos(a)

    def backward(self, grad):
        return (-grad * np.sin(self.inputs[0].data),)


class Sigmoid(Function):
    def forward(self, a):
        self.out = 0.5 * (1.0 + np.tanh(0.5 * a))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        return np.log(a)

    def backward(self, grad):
        return (grad / self.inputs[0].data,)


class Softmax(Function):
    def forward(self, a, axis=0):
        self.axis = axis
        shifted = np.exp(a - a.max(axis=axis, keepdims=True))
        self.out = shifted / shifted.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, a, axis=0):
        self.axis = axis
        shifted = a - a.max(axis=axis, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = shifted - log_norm
        self.softmax = np.exp(out)
        return out

    def backward(self, grad):
        return (grad - self.softmax * grad.sum(axis=self.axis, keepdims=True),)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def sine(x: ArrayLike, omega: float = 1.0) -> Tensor:
    """y = sin(omega * x)."""
    if omega <= 0:
        raise ValueError(f"omega must be positive, got {omega}")
    return Sin.apply(x, omega=float(omega))


def cos(x: ArrayLike) -> Tensor:
    return Cos.apply(x)


def sigmoid(x: ArrayLike) -> Tensor:
    return Sigmoid.apply(x)


def exp(x: ArrayLike) -> Tensor:
    return Exp.apply(x)


def log(x: ArrayLike) -> Tensor:
    return Log.apply(x)


def softmax(x: ArrayLike, axis: int = 0) -> Tensor:
    return Softmax.apply(x, axis=axis)


def log_softmax(x: ArrayLike, axis: int = 0) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return MatMul.apply(a, b)
