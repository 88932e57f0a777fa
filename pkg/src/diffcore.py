"""
Dense tensor arithmetic with reverse-mode automatic differentiation.

Operations run eagerly on numpy arrays. While a Tape is active on the current
thread, every operation whose inputs require gradients is appended to it, so
the tape order is a topological order of the graph. Tape.backward walks the
record in reverse and accumulates gradients additively over fan-out.
"""

import logging
import threading
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)


class ContractViolation(ValueError):
    """An operation was called outside its documented preconditions."""


class NumericalFailure(ArithmeticError):
    """A numerical routine failed to produce a finite, converged result."""


class NonFiniteLossError(NumericalFailure):
    """The training loss (or one of its ancestors) is NaN or infinite."""


_DEFAULT_DTYPE = np.float64
_CHECK_FINITE = False
_state = threading.local()


def set_default_dtype(dtype: Any) -> None:
    """float64 for tests and gradient checks, float32 is allowed for training."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractViolation(f"Unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype() -> Any:
    return _DEFAULT_DTYPE


def set_finite_checks(enabled: bool) -> None:
    """When enabled, every forward operation asserts that its output is finite."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _tape_stack() -> List["Tape"]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable n-dimensional array that can take part in differentiation."""

    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None, dtype: Any = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = requires_grad
        out.name = None
        return out

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
    def dtype(self) -> Any:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other: Any) -> "Tensor":
        return Add.apply(self, _lift(other, self))

    def __radd__(self, other: Any) -> "Tensor":
        return Add.apply(_lift(other, self), self)

    def __sub__(self, other: Any) -> "Tensor":
        return Sub.apply(self, _lift(other, self))

    def __rsub__(self, other: Any) -> "Tensor":
        return Sub.apply(_lift(other, self), self)

    def __mul__(self, other: Any) -> "Tensor":
        return Mul.apply(self, _lift(other, self))

    def __rmul__(self, other: Any) -> "Tensor":
        return Mul.apply(_lift(other, self), self)

    def __truediv__(self, other: Any) -> "Tensor":
        return Div.apply(self, _lift(other, self))

    def __rtruediv__(self, other: Any) -> "Tensor":
        return Div.apply(_lift(other, self), self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return Power.apply(self, exponent=float(exponent))

    def __matmul__(self, other: Any) -> "Tensor":
        return MatMul.apply(self, _lift(other, self))

    def __getitem__(self, index: Any) -> "Tensor":
        return GetItem.apply(self, index=index)

    def sum(self, axis: Union[None, int, Tuple[int, ...]] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Union[None, int, Tuple[int, ...]] = None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes: int) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def sqrt(self) -> "Tensor":
        return Sqrt.apply(self)

    def abs(self) -> "Tensor":
        return Abs.apply(self)

    def sin(self) -> "Tensor":
        return Sin.apply(self)

    def cos(self) -> "Tensor":
        return Cos.apply(self)

    def sigmoid(self) -> "Tensor":
        return Sigmoid.apply(self)

    def tanh(self) -> "Tensor":
        return Tanh.apply(self)

    def relu(self) -> "Tensor":
        return Relu.apply(self)

    def leaky_relu(self, slope: float = 0.2) -> "Tensor":
        return LeakyRelu.apply(self, slope=slope)

    def softplus(self) -> "Tensor":
        return Softplus.apply(self)

    def clip(self, low: float, high: float) -> "Tensor":
        return Clip.apply(self, low=low, high=high)

    def flip(self, axis: int) -> "Tensor":
        return Flip.apply(self, axis=axis)


def _lift(value: Any, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=like.dtype), False)


def tensor(data: Any, requires_grad: bool = False, name: Optional[str] = None, dtype: Any = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


def constant(data: Any, dtype: Any = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype or _DEFAULT_DTYPE))


def stop_gradient(t: Tensor) -> Tensor:
    return t.detach()


class _Node:
    __slots__ = ("fn", "inputs", "output")

    def __init__(self, fn: "Function", inputs: Tuple[Tensor, ...], output: Tensor):
        self.fn = fn
        self.inputs = inputs
        self.output = output


class Tape:
    """Ordered record of the operations of one differentiation pass.

    A tape is confined to the thread that entered it; parallel workers each
    open their own.
    """

    def __init__(self) -> None:
        self.nodes: List[_Node] = []
        self._produced: set = set()
        self._leaves: Dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, fn: "Function", inputs: Tuple[Tensor, ...], output: Tensor) -> None:
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced and id(t) not in self._leaves:
                self._leaves[id(t)] = t
        self._produced.add(id(output))
        self.nodes.append(_Node(fn, inputs, output))

    @property
    def leaves(self) -> List[Tensor]:
        return list(self._leaves.values())

    def backward(self, loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
        """Gradient of a scalar loss for every requires_grad leaf (or for `wrt`).

        Leaves that do not participate in the loss get zeros.
        """
        if loss.shape != ():
            raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
        targets = list(wrt) if wrt is not None else self.leaves
        keep = {id(t) for t in targets}
        grads: Dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            if id(node.output) not in keep:
                del grads[id(node.output)]
            input_grads = node.fn.backward(g)
            for t, ig in zip(node.inputs, input_grads):
                if ig is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        result: Dict[Tensor, np.ndarray] = {}
        for t in targets:
            g = grads.get(id(t))
            if g is None:
                g = np.zeros_like(t.data)
            result[t] = np.asarray(g, dtype=t.dtype).reshape(t.shape)
        return result

    def first_nonfinite(self) -> Optional[str]:
        """Name the first recorded op whose output holds NaN/Inf, and the non-finite leaf feeding it if any."""
        parts = []
        for index, node in enumerate(self.nodes):
            if not np.all(np.isfinite(node.output.data)):
                parts.append(f"{type(node.fn).__name__} output (tape node {index}, shape {node.output.shape})")
                break
        for leaf in self._leaves.values():
            if not np.all(np.isfinite(leaf.data)):
                parts.append(f"leaf {leaf.name or '<unnamed>'} shape {leaf.shape}")
                break
        return " from ".join(parts) or None


def backward(loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
    tape = active_tape()
    if tape is None:
        raise ContractViolation("backward called without an active Tape")
    return tape.backward(loss, wrt=wrt)


class Function:
    """Base class for differentiable operations.

    `forward` receives the numpy data of the inputs, `backward` receives the
    gradient of the loss w.r.t. the output and returns one gradient (or None)
    per input.
    """

    def __init__(self, **options: Any):
        self.__dict__.update(options)

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__}.forward")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__}.backward")

    @classmethod
    def apply(cls, *inputs: Tensor, **options: Any) -> Tensor:
        fn = cls(**options)
        out = fn.forward(*(t.data for t in inputs))
        if _CHECK_FINITE and not np.all(np.isfinite(out)):
            raise NumericalFailure(f"{cls.__name__} produced non-finite values (shape {np.shape(out)})")
        requires_grad = any(t.requires_grad for t in inputs)
        result = Tensor._wrap(out, requires_grad)
        tape = active_tape()
        if tape is not None and requires_grad:
            tape.record(fn, inputs, result)
        return result


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so that grad matches shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for dim, size in enumerate(shape):
        if size == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


def _check_broadcast(name: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{name}: shapes {a.shape} and {b.shape} do not broadcast")


def segment_sum(values: np.ndarray, index: np.ndarray, count: int) -> np.ndarray:
    """Sum rows of `values` into `count` buckets chosen by `index` (fixed order)."""
    index = np.asarray(index).reshape(-1)
    flat = values.reshape(index.shape[0], -1)
    if flat.shape[1] > 8:
        out = np.zeros((count, flat.shape[1]), dtype=values.dtype)
        np.add.at(out, index, flat)
    else:
        out = np.empty((count, flat.shape[1]), dtype=values.dtype)
        for f in range(flat.shape[1]):
            out[:, f] = np.bincount(index, weights=flat[:, f], minlength=count)
    return out.reshape((count,) + values.shape[1:])


class Add(Function):
    def forward(self, a, b):
        _check_broadcast("add", a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        _check_broadcast("sub", a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _check_broadcast("mul", a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return unbroadcast(grad * self.b, self.a.shape), unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        _check_broadcast("div", a, b)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        ga = grad / self.b
        gb = -grad * self.a / (self.b * self.b)
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


class Maximum(Function):
    def forward(self, a, b):
        _check_broadcast("maximum", a, b)
        self.shapes = (a.shape, b.shape)
        self.mask = a >= b
        return np.maximum(a, b)

    def backward(self, grad):
        return (unbroadcast(grad * self.mask, self.shapes[0]),
                unbroadcast(grad * ~self.mask, self.shapes[1]))


class Minimum(Function):
    def forward(self, a, b):
        _check_broadcast("minimum", a, b)
        self.shapes = (a.shape, b.shape)
        self.mask = a <= b
        return np.minimum(a, b)

    def backward(self, grad):
        return (unbroadcast(grad * self.mask, self.shapes[0]),
                unbroadcast(grad * ~self.mask, self.shapes[1]))


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Power(Function):
    def forward(self, x):
        self.x = x
        return x ** self.exponent

    def backward(self, grad):
        return (grad * self.exponent * self.x ** (self.exponent - 1.0),)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Sqrt(Function):
    def forward(self, x):
        self.out = np.sqrt(x)
        return self.out

    def backward(self, grad):
        return (grad * 0.5 / self.out,)


class Abs(Function):
    def forward(self, x):
        self.sign = np.sign(x)
        return np.abs(x)

    def backward(self, grad):
        return (grad * self.sign,)


class Sin(Function):
    def forward(self, x):
        self.x = x
        return np.sin(x)

    def backward(self, grad):
        return (grad * np.cos(self.x),)


class Cos(Function):
    def forward(self, x):
        self.x = x
        return np.cos(x)

    def backward(self, grad):
        return (-grad * np.sin(self.x),)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(np.result_type(x, np.float32), copy=False)


class Sigmoid(Function):
    def forward(self, x):
        self.out = _sigmoid(np.asarray(x))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Tanh(Function):
    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return (grad * self.mask,)


class LeakyRelu(Function):
    # slope defaults to 0.2 at the Tensor API
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, self.slope * x).astype(x.dtype, copy=False)

    def backward(self, grad):
        return (grad * np.where(self.mask, 1.0, self.slope).astype(grad.dtype, copy=False),)


class Softplus(Function):
    def forward(self, x):
        self.x = np.asarray(x)
        return np.log1p(np.exp(-np.abs(self.x))) + np.maximum(self.x, 0.0)

    def backward(self, grad):
        return (grad * _sigmoid(self.x),)


class Clip(Function):
    def forward(self, x):
        self.mask = (x >= self.low) & (x <= self.high)
        return np.clip(x, self.low, self.high)

    def backward(self, grad):
        return (grad * self.mask,)


class Sum(Function):
    def forward(self, x):
        self.shape = x.shape
        return np.asarray(np.sum(x, axis=self.axis, keepdims=self.keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if isinstance(self.axis, int) else self.axis
            axes = tuple(a % len(self.shape) for a in axes)
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    def forward(self, x):
        self.in_shape = x.shape
        return x.reshape(self.shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Transpose(Function):
    def forward(self, x):
        if not self.axes:
            self.axes = tuple(reversed(range(x.ndim)))
        return np.transpose(x, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


def _is_basic_index(index: Any) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis), type(None))) for p in parts)


class GetItem(Function):
    def forward(self, x):
        self.shape = x.shape
        self.dtype = x.dtype
        return np.asarray(x[self.index])

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        if _is_basic_index(self.index):
            out[self.index] = grad
        else:
            np.add.at(out, self.index, grad)
        return (out,)


class Concat(Function):
    def forward(self, *arrays):
        self.sizes = [a.shape[self.axis] for a in arrays]
        try:
            return np.concatenate(arrays, axis=self.axis)
        except ValueError:
            raise ContractViolation(f"concat: incompatible shapes {[a.shape for a in arrays]} on axis {self.axis}")

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


class Stack(Function):
    def forward(self, *arrays):
        self.count = len(arrays)
        try:
            return np.stack(arrays, axis=self.axis)
        except ValueError:
            raise ContractViolation(f"stack: shapes differ {[a.shape for a in arrays]}")

    def backward(self, grad):
        parts = np.split(grad, self.count, axis=self.axis)
        return tuple(np.squeeze(p, axis=self.axis) for p in parts)


class Flip(Function):
    def forward(self, x):
        return np.flip(x, axis=self.axis).copy()

    def backward(self, grad):
        return (np.flip(grad, axis=self.axis).copy(),)


class Pad(Function):
    def forward(self, x):
        self.slices = tuple(slice(lo, lo + n) for (lo, _), n in zip(self.width, x.shape))
        return np.pad(x, self.width)

    def backward(self, grad):
        return (grad[self.slices],)


class BroadcastTo(Function):
    def forward(self, x):
        self.in_shape = x.shape
        try:
            return np.broadcast_to(x, self.shape).copy()
        except ValueError:
            raise ContractViolation(f"broadcast_to: cannot broadcast {x.shape} to {self.shape}")

    def backward(self, grad):
        return (unbroadcast(grad, self.in_shape),)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ContractViolation(f"matmul: shapes {a.shape} and {b.shape} do not conform")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        ga = grad @ np.swapaxes(self.b, -1, -2)
        gb = np.swapaxes(self.a, -1, -2) @ grad
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


class Take(Function):
    """Gather rows along axis 0."""

    def forward(self, x):
        self.rows = x.shape[0]
        return x[self.index]

    def backward(self, grad):
        flat = grad.reshape((-1,) + grad.shape[np.ndim(self.index):])
        return (segment_sum(flat, self.index, self.rows),)


class ScatterAdd(Function):
    """Sum rows into `count` buckets along axis 0."""

    def forward(self, x):
        if x.shape[0] != np.size(self.index):
            raise ContractViolation(f"scatter_add: {x.shape[0]} rows but {np.size(self.index)} indices")
        return segment_sum(x, self.index, self.count)

    def backward(self, grad):
        return (grad[np.asarray(self.index).reshape(-1)],)


def _window(size: int, start: int, stride: int) -> slice:
    return slice(start, start + stride * (size - 1) + 1, stride)


class Conv2d(Function):
    """x (B, C, H, W) * w (O, C, k, k) with zero padding."""

    def forward(self, x, w):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ContractViolation(f"conv2d: input {x.shape} and weight {w.shape} do not conform")
        s, p = self.stride, self.padding
        self.xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        self.w = w
        self.in_shape = x.shape
        _, _, hp, wp = self.xp.shape
        kh, kw = w.shape[2:]
        self.ho = (hp - kh) // s + 1
        self.wo = (wp - kw) // s + 1
        out = np.zeros((x.shape[0], self.ho, self.wo, w.shape[0]), dtype=np.result_type(x, w))
        for i in range(kh):
            for j in range(kw):
                patch = self.xp[:, :, _window(self.ho, i, s), _window(self.wo, j, s)]
                out += np.tensordot(patch, w[:, :, i, j], axes=([1], [1]))
        return out.transpose(0, 3, 1, 2).copy()

    def backward(self, grad):
        s, p = self.stride, self.padding
        kh, kw = self.w.shape[2:]
        gt = grad.transpose(0, 2, 3, 1)
        gxp = np.zeros_like(self.xp)
        gw = np.zeros_like(self.w)
        for i in range(kh):
            for j in range(kw):
                rows, cols = _window(self.ho, i, s), _window(self.wo, j, s)
                patch = self.xp[:, :, rows, cols]
                gw[:, :, i, j] = np.tensordot(grad, patch, axes=([0, 2, 3], [0, 2, 3]))
                gxp[:, :, rows, cols] += np.tensordot(gt, self.w[:, :, i, j], axes=([3], [0])).transpose(0, 3, 1, 2)
        h, w = self.in_shape[2:]
        return gxp[:, :, p:p + h, p:p + w], gw


class ConvTranspose2d(Function):
    """x (B, C, H, W) with w (C, O, k, k); output (H - 1) * stride + k - 2 * padding."""

    def forward(self, x, w):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
            raise ContractViolation(f"conv_transpose2d: input {x.shape} and weight {w.shape} do not conform")
        s, p = self.stride, self.padding
        self.x, self.w = x, w
        b, _, h, wd = x.shape
        kh, kw = w.shape[2:]
        self.full = ((h - 1) * s + kh, (wd - 1) * s + kw)
        full = np.zeros((b, w.shape[1]) + self.full, dtype=np.result_type(x, w))
        xt = x.transpose(0, 2, 3, 1)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(xt, w[:, :, i, j], axes=([3], [0]))
                full[:, :, _window(h, i, s), _window(wd, j, s)] += contrib.transpose(0, 3, 1, 2)
        return full[:, :, p:self.full[0] - p, p:self.full[1] - p].copy()

    def backward(self, grad):
        s, p = self.stride, self.padding
        _, _, h, wd = self.x.shape
        kh, kw = self.w.shape[2:]
        gfull = np.pad(grad, ((0, 0), (0, 0), (p, p), (p, p))) if p else grad
        gx = np.zeros(self.x.shape[:1] + self.x.shape[2:] + self.x.shape[1:2], dtype=grad.dtype)
        gw = np.zeros_like(self.w)
        for i in range(kh):
            for j in range(kw):
                gs = gfull[:, :, _window(h, i, s), _window(wd, j, s)]
                gx += np.tensordot(gs, self.w[:, :, i, j], axes=([1], [1]))
                gw[:, :, i, j] = np.tensordot(self.x, gs, axes=([0, 2, 3], [0, 2, 3]))
        return gx.transpose(0, 3, 1, 2), gw


class GroupNorm(Function):
    """Normalization over channel groups, without the affine part."""

    def forward(self, x):
        b, c = x.shape[:2]
        if self.groups <= 0 or c % self.groups:
            raise ContractViolation(f"group_norm: {self.groups} groups do not divide {c} channels")
        self.shape = x.shape
        xg = x.reshape(b, self.groups, -1)
        mean = xg.mean(axis=-1, keepdims=True)
        var = xg.var(axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + self.eps)
        self.xhat = (xg - mean) * self.inv
        return self.xhat.reshape(self.shape)

    def backward(self, grad):
        g = grad.reshape(self.xhat.shape)
        dx = self.inv * (g - g.mean(axis=-1, keepdims=True)
                         - self.xhat * (g * self.xhat).mean(axis=-1, keepdims=True))
        return (dx.reshape(self.shape),)


def bilinear_matrix(size_in: int, size_out: int, dtype: Any = None) -> np.ndarray:
    """Half-pixel aligned linear interpolation weights (size_out x size_in)."""
    m = np.zeros((size_out, size_in), dtype=dtype or _DEFAULT_DTYPE)
    scale = size_in / size_out
    for o in range(size_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size_in - 1)
        i1 = min(i0 + 1, size_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


class ResizeBilinear(Function):
    """Resize the two trailing axes."""

    def forward(self, x):
        self.mh = bilinear_matrix(x.shape[-2], self.size[0], x.dtype)
        self.mw = bilinear_matrix(x.shape[-1], self.size[1], x.dtype)
        return self.mh @ x @ self.mw.T

    def backward(self, grad):
        return (self.mh.T @ grad @ self.mw,)


def svd_nuclear(k: np.ndarray) -> Tuple[float, np.ndarray]:
    """Nuclear norm of a matrix and its U.V^T subgradient from the thin SVD.

    At repeated singular values U.V^T is one valid subgradient, not the unique one.
    """
    k = np.asarray(k)
    if k.ndim != 2:
        raise ContractViolation(f"svd_nuclear expects a matrix, got shape {k.shape}")
    if not np.all(np.isfinite(k)):
        raise ContractViolation("svd_nuclear: matrix contains NaN or Inf")
    try:
        u, s, vt = np.linalg.svd(k, full_matrices=False)
    except np.linalg.LinAlgError as e:
        raise NumericalFailure(f"SVD did not converge for a {k.shape} matrix: {e}")
    return float(s.sum()), u @ vt


class NuclearNorm(Function):
    def forward(self, k):
        value, self.subgrad = svd_nuclear(k)
        return np.asarray(value, dtype=k.dtype)

    def backward(self, grad):
        return (grad * self.subgrad,)


def add(a: Tensor, b: Any) -> Tensor:
    return a + b


def maximum(a: Tensor, b: Any) -> Tensor:
    return Maximum.apply(a, _lift(b, a))


def minimum(a: Tensor, b: Any) -> Tensor:
    return Minimum.apply(a, _lift(b, a))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Stack.apply(*tensors, axis=axis)


def flip(x: Tensor, axis: int) -> Tensor:
    return Flip.apply(x, axis=axis)


def pad(x: Tensor, width: Sequence[Tuple[int, int]]) -> Tensor:
    return Pad.apply(x, width=tuple(tuple(w) for w in width))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    return BroadcastTo.apply(x, shape=tuple(shape))


def take(x: Tensor, index: np.ndarray) -> Tensor:
    return Take.apply(x, index=np.asarray(index, dtype=np.int64))


def scatter_add(x: Tensor, index: np.ndarray, count: int) -> Tensor:
    return ScatterAdd.apply(x, index=np.asarray(index, dtype=np.int64).reshape(-1), count=int(count))


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    out = Conv2d.apply(x, w, stride=stride, padding=padding)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


def conv_transpose2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    out = ConvTranspose2d.apply(x, w, stride=stride, padding=padding)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


def linear(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x (B, in) with w (in, out)."""
    out = MatMul.apply(x, w)
    if bias is not None:
        out = out + bias
    return out


def group_norm(x: Tensor, groups: int, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None,
               eps: float = 1e-5) -> Tensor:
    out = GroupNorm.apply(x, groups=int(groups), eps=eps)
    if gamma is not None:
        out = out * gamma.reshape(1, -1, 1, 1)
    if beta is not None:
        out = out + beta.reshape(1, -1, 1, 1)
    return out


def resize_bilinear(x: Tensor, size: Tuple[int, int]) -> Tensor:
    return ResizeBilinear.apply(x, size=(int(size[0]), int(size[1])))


def nuclear_norm(k: Tensor) -> Tensor:
    return NuclearNorm.apply(k)


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def tanh(x: Tensor) -> Tensor:
    return x.tanh()


def relu(x: Tensor) -> Tensor:
    return x.relu()


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return x.leaky_relu(slope)
