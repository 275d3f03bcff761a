"""
Numerics Module

Dense tensor arithmetic with taped reverse-mode differentiation, responsible for:
- The Tensor value type (numpy storage, 32-bit or 64-bit precision)
- The ComputationRecord tape that differentiable operations append to
- Differentiable operations used by the grounder, the selection and the losses
- Central finite differences for gradient verification

Tracking is opt-in: operations are recorded only while a ComputationRecord is
active and at least one input is a parameter or derived from one, so the
evaluation path builds no graph at all.

Main Components:
- Tensor: array value with optional gradient buffer
- ComputationRecord: ordered node tape, used as a context manager
- backward: reverse sweep that accumulates parameter gradients
- custom_op: extension point for operations with hand-written gradients

Author: GCG Development Team
Version: 1.0.0
"""

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import Config
from .exceptions import ContractError, InvalidMaskError, NumericError, ShapeError

_DTYPES = {"float32": np.dtype(np.float32), "float64": np.dtype(np.float64)}
_state = threading.local()

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def default_dtype() -> np.dtype:
    """Precision used for newly created tensors in this thread."""
    return getattr(_state, "dtype", _DTYPES["float32"])


def set_precision(mode: str) -> None:
    if mode not in _DTYPES:
        raise ContractError(f"unknown precision mode: {mode}")
    _state.dtype = _DTYPES[mode]


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    """Temporarily switch the default precision (used by gradient checks)."""
    previous = default_dtype()
    set_precision(mode)
    try:
        yield
    finally:
        _state.dtype = previous


class Tensor:
    """
    Dense row-major array with an optional gradient buffer.

    Tensors are treated as immutable values once built; parameters are the only
    tensors whose ``data`` is rewritten, and only by the optimizer step.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tracked")
    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 name: Optional[str] = None, dtype: Optional[np.dtype] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tracked = requires_grad

    @classmethod
    def _wrap(cls, array: np.ndarray, tracked: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = array
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._tracked = tracked
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got extents {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(_lift(other, self), self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(_lift(other, self), self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(_lift(other, self), self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(_lift(other, self), self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, _lift(other, self))

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


def as_tensor(value: ArrayLike, dtype: Optional[np.dtype] = None) -> Tensor:
    """Wrap a constant; tensors pass through unchanged."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def _lift(value: ArrayLike, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=like.dtype), False)


@dataclass
class Node:
    """One recorded operation: tag, inputs, output and its gradient rule."""

    tag: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class ComputationRecord:
    """
    Ordered tape of recorded operations.

    Use as a context manager; operations executed inside the ``with`` block on
    tracked inputs are appended in execution order, so every node's inputs
    appear earlier in the sequence.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []

    def __enter__(self) -> "ComputationRecord":
        _record_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _record_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def append(self, node: Node) -> None:
        self.nodes.append(node)

    def tags(self) -> List[str]:
        return [node.tag for node in self.nodes]

    @staticmethod
    def current() -> Optional["ComputationRecord"]:
        stack = _record_stack()
        return stack[-1] if stack else None


def _record_stack() -> List[ComputationRecord]:
    stack = getattr(_state, "records", None)
    if stack is None:
        stack = []
        _state.records = stack
    return stack


def custom_op(tag: str, inputs: Sequence[Tensor], value: np.ndarray,
              backward_fn: BackwardFn) -> Tensor:
    """
    Register an operation with a hand-written gradient rule.

    Args:
        tag: operation tag stored on the node
        inputs: input tensors, in the order ``backward_fn`` returns gradients
        value: forward result
        backward_fn: maps the output gradient to one gradient (or None) per input

    Returns:
        Tensor: the output, recorded when any input is tracked
    """
    value = np.asarray(value)
    if inputs and value.dtype.kind == "f":
        value = value.astype(np.result_type(*[t.dtype for t in inputs]), copy=False)
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{tag}: non-finite values in result")
    record = ComputationRecord.current()
    tracked = record is not None and any(t._tracked for t in inputs)
    out = Tensor._wrap(value, tracked)
    if tracked:
        record.append(Node(tag, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, record: Optional[ComputationRecord] = None) -> None:
    """
    Reverse sweep from a scalar loss.

    Gradients are added into ``grad`` of every parameter reached; calling again
    without zeroing accumulates.

    Raises:
        ContractError: the loss is not a scalar
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got extents {loss.shape}")
    record = record if record is not None else ComputationRecord.current()
    seed = np.ones_like(loss.data)
    if loss.requires_grad:
        _accumulate_leaf(loss, seed)
    if record is None:
        return
    grads = {id(loss): seed}
    for node in reversed(record.nodes):
        upstream = grads.pop(id(node.output), None)
        if upstream is None:
            continue
        input_grads = node.backward(upstream)
        for tensor, grad in zip(node.inputs, input_grads):
            if grad is None or not tensor._tracked:
                continue
            grad = np.asarray(grad, dtype=tensor.dtype).reshape(tensor.shape)
            if tensor.requires_grad:
                _accumulate_leaf(tensor, grad)
            elif id(tensor) in grads:
                grads[id(tensor)] = grads[id(tensor)] + grad
            else:
                grads[id(tensor)] = grad


def _accumulate_leaf(tensor: Tensor, grad: np.ndarray) -> None:
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=tensor.dtype)
    else:
        tensor.grad = tensor.grad + grad


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(tag: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{tag}: extents {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a: ArrayLike, b: ArrayLike, tag: str = "add") -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    _check_broadcast(tag, a, b)
    return custom_op(tag, (a, b), a.data + b.data,
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    _check_broadcast("sub", a, b)
    return custom_op("sub", (a, b), a.data - b.data,
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike, tag: str = "mul") -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    _check_broadcast(tag, a, b)
    return custom_op(tag, (a, b), a.data * b.data,
                     lambda g: (_unbroadcast(g * b.data, a.shape),
                                _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return custom_op("div", (a, b), out,
                     lambda g: (_unbroadcast(g / b.data, a.shape),
                                _unbroadcast(-g * out / b.data, b.shape)))


def sigmoid(x: Tensor) -> Tensor:
    z = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return custom_op("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    # 32 位下先用 64 位计算再收窄，溢出由 custom_op 的有限性检查报告
    with np.errstate(over="ignore"):
        y = np.exp(x.data.astype(np.float64)).astype(x.dtype)
    return custom_op("exp", (x,), y, lambda g: (g * y,))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU"""
    v = x.data
    t = np.tanh(_GELU_C * (v + 0.044715 * v ** 3))
    y = 0.5 * v * (1.0 + t)
    dy = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
    return custom_op("gelu", (x,), y, lambda g: (g * dy,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return custom_op("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype),
                     lambda g: (g * mask,))


def scale(x: Tensor, factor: ArrayLike) -> Tensor:
    return mul(x, factor, tag="scale")


def add_bias(x: Tensor, bias: ArrayLike) -> Tensor:
    return add(x, bias, tag="add_bias")


_POINTWISE = {
    "sigmoid": sigmoid,
    "exp": exp,
    "gelu": gelu,
    "relu": relu,
}


def pointwise(x: Tensor, f: str, arg: Optional[ArrayLike] = None) -> Tensor:
    """
    Apply one of sigmoid, exp, gelu, relu, scale, add_bias elementwise.

    ``scale`` and ``add_bias`` take the broadcastable second argument ``arg``.
    """
    if f == "scale":
        return scale(x, arg)
    if f == "add_bias":
        return add_bias(x, arg)
    if f not in _POINTWISE:
        raise ContractError(f"unknown pointwise function: {f}")
    return _POINTWISE[f](x)


def smooth_l1(x: Tensor, beta: float = 1.0) -> Tensor:
    v = x.data
    small = np.abs(v) < beta
    y = np.where(small, 0.5 * v * v / beta, np.abs(v) - 0.5 * beta).astype(x.dtype)
    return custom_op("smooth_l1", (x,), y,
                     lambda g: (g * np.where(small, v / beta, np.sign(v)),))


# ---------------------------------------------------------------- structure

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product of two 2-D tensors.

    Raises:
        ShapeError: rank other than 2 or inner extents differ
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got extents {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} · {b.shape}")
    return custom_op("matmul", (a, b), a.data @ b.data,
                     lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got extents {x.shape}")
    return custom_op("transpose", (x,), np.ascontiguousarray(x.data.T), lambda g: (g.T,))


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return custom_op("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        raise ContractError("index with arrays, not tensors")

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return custom_op("getitem", (x,), np.array(x.data[index]), _backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}: {e}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return custom_op("concat", tuple(tensors), value,
                     lambda g: tuple(np.split(g, splits, axis=axis)))


def reduce_sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    value = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return custom_op("sum", (x,), value, _backward)


def reduce_mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis, keepdims), 1.0 / count)


def reduce_max(x: Tensor) -> Tensor:
    """Maximum over all entries; the gradient goes to the first maximal entry."""
    flat = int(np.argmax(x.data))
    return _pick(x, flat, "max")


def reduce_min(x: Tensor) -> Tensor:
    flat = int(np.argmin(x.data))
    return _pick(x, flat, "min")


def _pick(x: Tensor, flat: int, tag: str) -> Tensor:
    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros_like(x.data)
        full.reshape(-1)[flat] = g.reshape(-1)[0]
        return (full,)

    return custom_op(tag, (x,), np.asarray(x.data.reshape(-1)[flat]), _backward)


# ---------------------------------------------------------------- row-wise

def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Row softmax with optional boolean mask (True = keep).

    Masked entries are exactly zero; each row is shifted by its maximum over
    unmasked entries.

    Raises:
        InvalidMaskError: a row has no unmasked entry
    """
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got extents {x.shape}")
    if mask is None:
        keep = np.ones(x.shape, dtype=bool)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not np.all(keep.any(axis=1)):
        bad = int(np.flatnonzero(~keep.any(axis=1))[0])
        raise InvalidMaskError(f"softmax row {bad} is fully masked")
    masked = np.where(keep, x.data, -np.inf)
    shifted = masked - masked.max(axis=1, keepdims=True)
    e = np.where(keep, np.exp(shifted), 0.0)
    y = (e / e.sum(axis=1, keepdims=True)).astype(x.dtype)
    return custom_op("softmax_rows", (x,), y,
                     lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


def logsumexp_rows(x: Tensor) -> Tensor:
    """Row log-sum-exp with max subtraction; returns one value per row."""
    if x.ndim != 2:
        raise ShapeError(f"logsumexp_rows needs a 2-D tensor, got extents {x.shape}")
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=1, keepdims=True)
    y = (m + np.log(s)).reshape(-1)
    soft = e / s
    return custom_op("logsumexp_rows", (x,), y, lambda g: (g[:, None] * soft,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor,
               eps: float = Config.LAYER_NORM_EPS) -> Tensor:
    """Per-row normalisation followed by gain and bias of extent c (c ≥ 2)."""
    if x.ndim != 2 or x.shape[1] < 2:
        raise ContractError(f"layer_norm needs r×c input with c ≥ 2, got extents {x.shape}")
    if gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm gain/bias extents {gain.shape}/{bias.shape} vs {x.shape}")
    centred = x.data - x.data.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt((centred * centred).mean(axis=1, keepdims=True) + eps)
    xhat = centred * inv
    y = gain.data * xhat + bias.data

    def _backward(g: np.ndarray):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return custom_op("layer_norm", (x, gain, bias), y, _backward)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale every row of a 2-D tensor to unit Euclidean norm."""
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize_rows needs a 2-D tensor, got extents {x.shape}")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    safe = np.maximum(norm, eps)
    y = x.data / safe

    def _backward(g: np.ndarray):
        proj = np.where(norm > eps, y * (g * y).sum(axis=1, keepdims=True), 0.0)
        return ((g - proj) / safe,)

    return custom_op("l2_normalize_rows", (x,), y, _backward)


# ---------------------------------------------------------------- verification

def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     h: float = Config.GRADCHECK_STEP,
                     coords: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    Central-difference gradient of a scalar function.

    Args:
        f: scalar function of an array with the extents of ``x``
        x: evaluation point (copied, evaluated at 64-bit)
        h: step
        coords: flat coordinates to perturb; the others are returned as NaN

    Returns:
        np.ndarray: (f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h per perturbed coordinate
    """
    x = np.array(x, dtype=np.float64)
    grad = np.full(x.shape, np.nan if coords is not None else 0.0)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in (range(flat_x.size) if coords is None else coords):
        original = flat_x[i]
        flat_x[i] = original + h
        upper = float(f(x))
        flat_x[i] = original - h
        lower = float(f(x))
        flat_x[i] = original
        flat_g[i] = (upper - lower) / (2.0 * h)
    return grad


def compare_gradients(analytic: np.ndarray, numeric: np.ndarray,
                      rel_tol: float = Config.GRADCHECK_REL_TOL,
                      abs_tol: float = Config.GRADCHECK_ABS_TOL) -> Tuple[bool, float, float]:
    """
    Compare gradients entrywise, ignoring NaN (unchecked) entries.

    An entry passes when its absolute error is within ``abs_tol`` or its
    relative error is below ``rel_tol``.

    Returns:
        tuple[bool, float, float]: (passed, max relative error, max absolute error)
    """
    checked = ~np.isnan(numeric)
    a = np.asarray(analytic, dtype=np.float64)[checked]
    n = numeric[checked]
    if a.size == 0:
        return True, 0.0, 0.0
    err = np.abs(a - n)
    rel = err / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-300)
    rel = np.where(err <= abs_tol, 0.0, rel)
    passed = bool(np.all((err <= abs_tol) | (rel < rel_tol)))
    return passed, float(rel.max()), float(err.max())
