"""
Dense Tensor Core
float32 tensors, a reverse-mode tape covering the operations the dream network
and the temporal losses need, and the Adam optimizer
"""

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ContractError, ShapeError, UnsupportedPaddingError

logger = logging.getLogger(__name__)

# Compute dtype for every tensor built while the setting is active
_compute_dtype = np.float32


@contextlib.contextmanager
def float64_precision() -> Iterator[None]:
    """Evaluate in float64, used by finite-difference oracles"""
    global _compute_dtype
    previous = _compute_dtype
    _compute_dtype = np.float64
    try:
        yield
    finally:
        _compute_dtype = previous


def compute_dtype():
    return _compute_dtype


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeNode:
    """One recorded operation: identifier, inputs and its backward rule"""

    op: str
    inputs: Tuple["Tensor", ...]
    backward_fn: BackwardFn
    saved: Dict[str, np.ndarray] = field(default_factory=dict)


class Tensor:
    """n-dimensional array with an optional gradient"""

    def __init__(self, data, requires_grad: bool = False):
        array = np.array(data, dtype=_compute_dtype)
        _check_shape(array.shape)
        self._data = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[TapeNode] = None

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor._data = array
        tensor.requires_grad = requires_grad
        tensor.grad = None
        tensor._node = None
        return tensor

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def node(self) -> Optional[TapeNode]:
        return self._node

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self._data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def clamp_(self, low: float, high: float) -> "Tensor":
        """Clamp values in place; only valid on leaves"""
        if self._node is not None:
            raise ContractError("in-place clamp on a non-leaf tensor")
        np.clip(self._data, low, high, out=self._data)
        return self

    def backward(self) -> None:
        backward(self)

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return select(self, index)

    def square(self) -> "Tensor":
        return square(self)

    def sum(self) -> "Tensor":
        return total(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def flatten(self) -> "Tensor":
        return reshape(self, (-1,))


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence[float]]


def _check_shape(shape: Tuple[int, ...]) -> None:
    if any(dim <= 0 for dim in shape):
        raise ShapeError(f"tensor dimensions must be positive, got {shape}")


def as_tensor(value: TensorLike) -> Tensor:
    """Wrap arrays and scalars as constant tensors without copying"""
    if isinstance(value, Tensor):
        return value
    array = np.asarray(value, dtype=_compute_dtype)
    _check_shape(array.shape)
    return Tensor._wrap(array, False)


def _result(array: np.ndarray, op: str, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(np.asarray(array, dtype=_compute_dtype), requires_grad)
    if requires_grad:
        out._node = TapeNode(op, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# =============================================================================
# ELEMENTWISE AND STRUCTURAL OPERATIONS
# =============================================================================


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward_fn(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return _result(out, "add", (a, b), backward_fn)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward_fn(grad):
        grad_a = _unbroadcast(grad * b.data, a.shape) if a.requires_grad else None
        grad_b = _unbroadcast(grad * a.data, b.shape) if b.requires_grad else None
        return grad_a, grad_b

    return _result(out, "mul", (a, b), backward_fn)


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, "neg", (a,), lambda grad: (-grad,))


def square(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, "square", (a,), lambda grad: (2.0 * a.data * grad,))


def total(a: TensorLike) -> Tensor:
    """Sum of all entries as a scalar, accumulated in float64"""
    a = as_tensor(a)
    out = np.asarray(np.sum(a.data, dtype=np.float64))

    def backward_fn(grad):
        return (np.broadcast_to(grad, a.shape).astype(a.data.dtype),)

    return _result(out, "sum", (a,), backward_fn)


def select(a: TensorLike, index) -> Tensor:
    a = as_tensor(a)
    out = np.array(a.data[index])

    def backward_fn(grad):
        full = np.zeros_like(a.data)
        np.add.at(full, index, grad)
        return (full,)

    return _result(out, "select", (a,), backward_fn)


def reshape(a: TensorLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _result(out, "reshape", (a,), lambda grad: (grad.reshape(a.shape),))


# =============================================================================
# NETWORK OPERATIONS
# =============================================================================


def relu(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0
    out = np.where(active, x.data, 0.0)
    # zero subgradient at exactly 0
    return _result(out, "relu", (x,), lambda grad: (grad * active,))


def mirror_pad(x: TensorLike, ph: int, pw: int) -> Tensor:
    """Reflect-101 padding of an HxWxC tensor (row -1 maps to row 1)"""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"mirror_pad expects HxWxC, got {x.shape}")
    height, width = x.shape[0], x.shape[1]
    if ph < 0 or pw < 0:
        raise UnsupportedPaddingError(f"negative padding ({ph}, {pw})")
    if ph >= height or pw >= width:
        raise UnsupportedPaddingError(
            f"padding ({ph}, {pw}) must be smaller than spatial size ({height}, {width})"
        )
    if ph == 0 and pw == 0:
        return _result(x.data.copy(), "mirror_pad", (x,), lambda grad: (grad,))

    rows = np.pad(np.arange(height), ph, mode="reflect")
    cols = np.pad(np.arange(width), pw, mode="reflect")
    out = x.data[rows[:, None], cols[None, :]]

    def backward_fn(grad):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows[:, None], cols[None, :]), grad)
        return (full,)

    return _result(out, "mirror_pad", (x,), backward_fn)


def conv2d(x: TensorLike, kernel: TensorLike, bias: TensorLike) -> Tensor:
    """
    Cross-correlation of a mirror-padded HxWxC input with a khxkwxCxF kernel.
    Output spatial size is the unpadded size; inner products accumulate in float64.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects HxWxC input and 4-D kernel, got {x.shape} and {kernel.shape}")
    kh, kw, channels, filters = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d needs odd kernel sizes, got {kh}x{kw}")
    if x.shape[2] != channels:
        raise ShapeError(f"channel mismatch: input has {x.shape[2]}, kernel expects {channels}")
    if bias.shape != (filters,):
        raise ShapeError(f"bias shape {bias.shape} does not match {filters} filters")
    height, width = x.shape[0] - (kh - 1), x.shape[1] - (kw - 1)
    if height <= 0 or width <= 0:
        raise ShapeError(f"input {x.shape} too small for a {kh}x{kw} kernel")

    x64 = x.data.astype(np.float64)
    k64 = kernel.data.astype(np.float64)
    out = np.zeros((height, width, filters), dtype=np.float64)
    for dy in range(kh):
        for dx in range(kw):
            out += x64[dy : dy + height, dx : dx + width, :] @ k64[dy, dx]
    out += bias.data

    def backward_fn(grad):
        g64 = grad.astype(np.float64)
        grad_x = np.zeros_like(x64) if x.requires_grad else None
        grad_k = np.zeros_like(k64) if kernel.requires_grad else None
        for dy in range(kh):
            for dx in range(kw):
                if grad_x is not None:
                    grad_x[dy : dy + height, dx : dx + width, :] += g64 @ k64[dy, dx].T
                if grad_k is not None:
                    window = x64[dy : dy + height, dx : dx + width, :]
                    grad_k[dy, dx] = np.tensordot(window, g64, axes=([0, 1], [0, 1]))
        grad_b = g64.sum(axis=(0, 1)) if bias.requires_grad else None
        return grad_x, grad_k, grad_b

    return _result(out, "conv2d", (x, kernel, bias), backward_fn)


def avg_pool2(x: TensorLike) -> Tensor:
    """Mean over non-overlapping 2x2 windows"""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"avg_pool2 expects HxWxC, got {x.shape}")
    height, width, channels = x.shape
    if height % 2 or width % 2:
        raise ShapeError(f"avg_pool2 needs even spatial size, got {height}x{width}")
    out = x.data.reshape(height // 2, 2, width // 2, 2, channels).mean(axis=(1, 3))

    def backward_fn(grad):
        return (np.repeat(np.repeat(grad, 2, axis=0), 2, axis=1) * 0.25,)

    return _result(out, "avg_pool2", (x,), backward_fn)


def dense(x: TensorLike, weights: TensorLike, bias: TensorLike) -> Tensor:
    """Fully connected layer on the flattened input, float64 accumulation"""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if weights.ndim != 2:
        raise ShapeError(f"dense weights must be NxM, got {weights.shape}")
    rows, cols = weights.shape
    if x.size != rows:
        raise ShapeError(f"dense input length {x.size} does not match {rows} weight rows")
    if bias.shape != (cols,):
        raise ShapeError(f"dense bias shape {bias.shape} does not match {cols} outputs")

    flat = x.data.reshape(-1).astype(np.float64)
    w64 = weights.data.astype(np.float64)
    out = flat @ w64 + bias.data

    def backward_fn(grad):
        g64 = grad.astype(np.float64)
        grad_x = (w64 @ g64).reshape(x.shape) if x.requires_grad else None
        grad_w = np.outer(flat, g64) if weights.requires_grad else None
        return grad_x, grad_w, g64 if bias.requires_grad else None

    return _result(out, "dense", (x, weights, bias), backward_fn)


# =============================================================================
# REVERSE PASS
# =============================================================================


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor._node is not None:
            for parent in tensor._node.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every requires_grad leaf"""
    if root.shape != ():
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward root was not produced on the tape")

    grads: Dict[int, np.ndarray] = {id(root): np.ones((), dtype=root.data.dtype)}
    for tensor in reversed(_topological_order(root)):
        grad = grads.pop(id(tensor), None)
        if grad is None:
            continue
        if tensor._node is None:
            grad = np.asarray(grad, dtype=tensor.data.dtype).reshape(tensor.shape)
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
            continue
        input_grads = tensor._node.backward_fn(grad)
        for parent, parent_grad in zip(tensor._node.inputs, input_grads):
            if not parent.requires_grad or parent_grad is None:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


def finite_difference_gradient(
    fn: Callable[[np.ndarray], float],
    array: np.ndarray,
    indices: Optional[Sequence[Tuple[int, ...]]] = None,
    h: float = 1e-3,
) -> np.ndarray:
    """Central differences of a scalar function, evaluated in float64"""
    point = np.array(array, dtype=np.float64)
    result = np.zeros_like(point)
    targets = indices if indices is not None else list(np.ndindex(point.shape))
    with float64_precision():
        for index in targets:
            original = point[index]
            point[index] = original + h
            upper = fn(point)
            point[index] = original - h
            lower = fn(point)
            point[index] = original
            result[index] = (upper - lower) / (2.0 * h)
    return result


# =============================================================================
# ADAM
# =============================================================================


@dataclass
class AdamState:
    """Bias-corrected Adam moments for one optimized tensor"""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Tensor, lr: float = 0.02, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        zeros = np.zeros(param.shape, dtype=param.data.dtype)
        return cls(m=zeros, v=zeros.copy(), t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(param: Tensor, state: AdamState) -> Tuple[Tensor, AdamState]:
    """One descent step on param using its accumulated gradient"""
    if param.grad is None:
        raise ContractError("adam_step needs param.grad; call backward first")
    if state.m.shape != param.shape or state.v.shape != param.shape:
        raise ShapeError(f"Adam moments {state.m.shape} do not match parameter {param.shape}")

    grad = param.grad
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    if not np.any(grad):
        return param, state

    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    param._data -= update.astype(param.data.dtype)
    return param, state
