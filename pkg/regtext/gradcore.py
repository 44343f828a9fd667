"""
Reverse-mode automatic differentiation over dense numpy tensors
===============================================================

A ``Tensor`` wraps a numpy array. Every operation applied to tensors that
require gradients records its operands and a backward rule; ``backward``
walks the recorded graph in reverse topological order and accumulates
gradients into every tensor that requires them, including intermediate
tensors such as embedding lookups (adversarial perturbations need the
gradient with respect to the embedded input, not only the parameters).

``grad`` is the functional variant: it returns gradients for selected
tensors without touching any ``.grad`` slot.

Randomness never comes from global state: ``dropout`` takes an explicit
``numpy.random.Generator``.
"""

import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from regtext.errors import AxisError, DistributionError, GraphError, LabelRangeError, ProbabilityError, ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

NORM_EPS = 1e-12
PROB_EPS = 1e-8

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording the graph (evaluation, checkpoint scoring)."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    """Dense tensor node of a computation graph.

    ``grad`` stays None until a backward pass reaches the tensor or
    ``zero_grad`` allocates it; None reads as an all-zero gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward")
    # ndarray <op> Tensor must dispatch to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype=None,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[BackwardFn] = None,
        op: str = "leaf",
    ):
        if isinstance(data, Tensor):
            data = data.data
        array = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op = op
        self._parents = _parents
        self._backward = _backward

    # ------------------------------------------------------------------ info
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------- operators
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return subtract(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return subtract(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return multiply(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return multiply(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return divide(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return divide(other, self)

    def __neg__(self) -> "Tensor":
        return negate(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return take(self, index)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value: ArrayLike, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    tracked = is_grad_enabled() and any(p.requires_grad for p in parents)
    if not tracked:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_operands(op: str, a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    a_t = as_tensor(a)
    b_t = as_tensor(b, dtype=a_t.dtype if not isinstance(b, Tensor) else None)
    if not isinstance(a, Tensor):
        a_t = Tensor(a_t.data.astype(b_t.dtype, copy=False))
    try:
        np.broadcast_shapes(a_t.shape, b_t.shape)
    except ValueError:
        raise ShapeError(op, [a_t.shape, b_t.shape], "not broadcast-compatible") from None
    return a_t, b_t


# ---------------------------------------------------------------- elementwise
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_operands("add", a, b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward_fn, "add")


def subtract(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_operands("subtract", a, b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward_fn, "subtract")


def multiply(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_operands("multiply", a, b)

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward_fn, "multiply")


def divide(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_operands("divide", a, b)

    def backward_fn(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / (b.data * b.data), b.shape)

    return _result(a.data / b.data, (a, b), backward_fn, "divide")


def negate(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "negate")


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    # tanh form stays finite for any finite input
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    positive = a.data > 0
    return _result(np.where(positive, a.data, 0).astype(a.dtype), (a,), lambda g: (g * positive,), "relu")


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise maximum; ties send the gradient to ``a``."""
    a, b = _binary_operands("maximum", a, b)
    pick_a = a.data >= b.data

    def backward_fn(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _result(np.maximum(a.data, b.data), (a, b), backward_fn, "maximum")


# ------------------------------------------------------------------- linear
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """``a[..., k] @ b[k, n]``; leading axes of ``a`` are treated as a batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", [a.shape, b.shape], "inner extents differ")
    k, n = b.shape

    def backward_fn(g):
        grad_a = g @ b.data.T
        grad_b = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        return grad_a, grad_b

    return _result(a.data @ b.data, (a, b), backward_fn, "matmul")


# ---------------------------------------------------------------- reductions
def _normalize_axis(op: str, x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise AxisError(op, axis, x.shape)
    axis = axis % x.ndim
    if x.shape[axis] == 0:
        raise AxisError(op, axis, x.shape, "empty extent")
    return axis


def _expand_grad(g: np.ndarray, shape: Tuple[int, ...], axis: Optional[int], keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def reduce_sum(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False, order_invariant: bool = False) -> Tensor:
    """Sum along ``axis``.

    With ``order_invariant`` the values are added in sorted order along the
    axis, so any permutation of the input yields a bit-identical result.
    """
    x = as_tensor(x)
    if axis is not None:
        axis = _normalize_axis("sum", x, axis)
    elif x.size == 0:
        raise AxisError("sum", -1, x.shape, "empty tensor")
    values = np.sort(x.data, axis=axis) if order_invariant and axis is not None else x.data
    out = values.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        return (np.array(_expand_grad(g, x.shape, axis, keepdims)),)

    return _result(np.asarray(out), (x,), backward_fn, "sum")


def reduce_mean(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[_normalize_axis("mean", x, axis)]
    return reduce_sum(x, axis=axis, keepdims=keepdims) / float(max(count, 1))


def max_with_argmax(x: ArrayLike, axis: int, mask: Optional[np.ndarray] = None) -> Tuple[Tensor, np.ndarray]:
    """Max along ``axis`` plus the winning index.

    ``mask`` (broadcastable boolean) excludes positions; ties go to the
    lowest index. The backward pass routes the incoming gradient to the
    argmax position only.
    """
    x = as_tensor(x)
    axis = _normalize_axis("max", x, axis)
    values = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise AxisError("max", axis, x.shape, "a slice has no unmasked position")
        values = np.where(mask, values, -np.inf)
    index = np.argmax(values, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(index, axis), axis=axis).squeeze(axis)

    def backward_fn(g):
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, np.expand_dims(index, axis), np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _result(out, (x,), backward_fn, "max"), index


def reduce_max(x: ArrayLike, axis: int, mask: Optional[np.ndarray] = None) -> Tensor:
    return max_with_argmax(x, axis, mask)[0]


# ------------------------------------------------------------ shape handling
def reshape(x: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", [x.shape, tuple(shape)]) from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


class IndexedGrad(NamedTuple):
    """Gradient that is nonzero only on ``parent[index]``; scattered by the engine."""

    index: object
    value: np.ndarray
    basic: bool


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def take(x: ArrayLike, index) -> Tensor:
    """``x[index]`` for any numpy index; repeated indices accumulate gradient."""
    x = as_tensor(x)
    out = x.data[index]
    basic = _is_basic_index(index)
    return _result(np.array(out), (x,), lambda g: (IndexedGrad(index, g, basic),), "take")


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError("concat", [p.shape for p in parts]) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(parts), backward_fn, "concat")


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError("stack", [p.shape for p in parts]) from None

    def backward_fn(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(out, tuple(parts), backward_fn, "stack")


def pad(x: ArrayLike, widths: Sequence[Tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` as for ``numpy.pad``."""
    x = as_tensor(x)
    out = np.pad(x.data, widths)
    inner = tuple(slice(lo, lo + extent) for (lo, _), extent in zip(widths, x.shape))
    return _result(out, (x,), lambda g: (g[inner],), "pad")


# --------------------------------------------------------------- probability
def softmax(logits: ArrayLike, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (logits,), backward_fn, "softmax")


def log_softmax(logits: ArrayLike, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (logits,), backward_fn, "log_softmax")


def softmax_cross_entropy(logits: ArrayLike, labels: Sequence[int]) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy", [logits.shape, labels.shape])
    num_classes = logits.shape[1]
    bad = (labels < 0) | (labels >= num_classes)
    if bad.any():
        raise LabelRangeError(int(labels[bad][0]), num_classes)
    batch = logits.shape[0]
    rows = np.arange(batch)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[rows, labels].mean()

    def backward_fn(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (grad * (g / batch),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward_fn, "softmax_cross_entropy")


def _distribution_tolerance(array: np.ndarray) -> float:
    return 1e-6 if array.dtype == np.float64 else 1e-4


def _check_distribution(op: str, p: Tensor) -> None:
    deviation = float(np.abs(p.data.sum(axis=-1) - 1.0).max()) if p.size else 0.0
    if deviation > _distribution_tolerance(p.data):
        raise DistributionError(op, deviation)


def _check_pair(op: str, p: Tensor, q: Tensor) -> None:
    if p.shape != q.shape or p.ndim != 2:
        raise ShapeError(op, [p.shape, q.shape], "expected matching [batch, classes]")
    _check_distribution(op, p)
    _check_distribution(op, q)


def mse(p: ArrayLike, q: ArrayLike) -> Tensor:
    """Mean over all elements of ``(p - q)**2``; gradient flows into both."""
    p, q = as_tensor(p), as_tensor(q)
    _check_pair("mse", p, q)
    diff = p - q
    return reduce_mean(diff * diff)


def kld(p: ArrayLike, q: ArrayLike) -> Tensor:
    """Batch mean of ``sum p log(p / q)``; ``p`` is a constant target."""
    p_const = as_tensor(p).data
    q = as_tensor(q)
    _check_pair("kld", Tensor(p_const), q)
    batch = q.shape[0]
    q_clamped = np.clip(q.data, PROB_EPS, 1.0)
    p_log_p = np.where(p_const > 0, p_const * np.log(np.clip(p_const, PROB_EPS, 1.0)), 0.0)
    value = (p_log_p - p_const * np.log(q_clamped)).sum(axis=1).mean()
    live = q.data > PROB_EPS

    def backward_fn(g):
        return (-(g / batch) * p_const / q_clamped * live,)

    return _result(np.asarray(value, dtype=q.dtype), (q,), backward_fn, "kld")


def entropy(p: ArrayLike) -> Tensor:
    """Batch mean of ``-sum p log p``."""
    p = as_tensor(p)
    _check_distribution("entropy", p)
    batch = p.shape[0]
    p_clamped = np.clip(p.data, PROB_EPS, 1.0)
    log_p = np.log(p_clamped)
    value = -(p.data * log_p).sum(axis=-1).mean()

    def backward_fn(g):
        return (-(g / batch) * (log_p + (p.data > PROB_EPS)),)

    return _result(np.asarray(value, dtype=p.dtype), (p,), backward_fn, "entropy")


def l2_normalize(v: ArrayLike, per_example: Optional[bool] = None) -> Tensor:
    """``v / max(||v||_2, 1e-12)``.

    Batched input (``ndim > 1``) is normalized per example over all
    non-batch axes; a zero vector maps to zero.
    """
    v = as_tensor(v)
    if per_example is None:
        per_example = v.ndim > 1
    axes = tuple(range(1, v.ndim)) if per_example else None
    norm = np.sqrt((v.data * v.data).sum(axis=axes, keepdims=per_example))
    denom = np.maximum(norm, NORM_EPS)
    out = v.data / denom
    above = norm > NORM_EPS

    def backward_fn(g):
        projected = g - out * (g * out).sum(axis=axes, keepdims=per_example) * above
        return (projected / denom,)

    return _result(out, (v,), backward_fn, "l2_normalize")


def dropout_mask(shape: Tuple[int, ...], rate: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``rate``, else ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ProbabilityError("dropout rate", rate)
    if rate == 0.0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)


def dropout(x: ArrayLike, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ProbabilityError("dropout rate", rate)
    if not training or rate == 0.0:
        return x
    return x * dropout_mask(x.shape, rate, rng, dtype=x.dtype)


# ------------------------------------------------------------------ backward
class ComputationGraph:
    """Operations reachable from ``output``, in topological order.

    Only tensors that require gradients are recorded; operands always
    precede the operations that consume them.
    """

    def __init__(self, output: Tensor, stop_at: Sequence[Tensor] = ()):
        self.output = output
        stop_ids = {id(t) for t in stop_at}
        nodes = self._topological_order(output, stop_ids)
        if stop_ids:
            # keep only operations with a path down to one of the stop tensors
            leading = set(stop_ids)
            for node in nodes:
                if any(id(p) in leading for p in node._parents):
                    leading.add(id(node))
            nodes = [n for n in nodes if id(n) in leading]
        self.nodes: List[Tensor] = nodes
        self._members = {id(n) for n in nodes}

    @staticmethod
    def _topological_order(root: Tensor, stop_ids: set) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if id(node) in stop_ids:
                continue
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def propagate(self) -> Dict[int, np.ndarray]:
        """Reverse sweep from the output; returns gradients keyed by ``id``."""
        grads: Dict[int, np.ndarray] = {id(self.output): np.ones_like(self.output.data)}
        # buffers allocated here may be updated in place; others can alias upstream arrays
        owned = set()
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                key = id(parent)
                if parent_grad is None or key not in self._members:
                    continue
                if isinstance(parent_grad, IndexedGrad):
                    if key not in owned:
                        buffer = np.zeros_like(parent.data) if key not in grads else np.array(grads[key], dtype=parent.dtype)
                        grads[key] = buffer
                        owned.add(key)
                    value = np.asarray(parent_grad.value, dtype=parent.dtype)
                    if parent_grad.basic:
                        grads[key][parent_grad.index] += value
                    else:
                        np.add.at(grads[key], parent_grad.index, value)
                    continue
                parent_grad = np.asarray(parent_grad, dtype=parent.dtype)
                if key in owned:
                    grads[key] += parent_grad
                elif key in grads:
                    grads[key] = grads[key] + parent_grad
                    owned.add(key)
                else:
                    grads[key] = parent_grad
        return grads


def _check_scalar(loss: Tensor) -> None:
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires gradients")


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d t`` into ``t.grad`` for every tracked ``t``."""
    _check_scalar(loss)
    graph = ComputationGraph(loss)
    grads = graph.propagate()
    for node in graph.nodes:
        g = grads.get(id(node))
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g


def grad(loss: Tensor, inputs: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``inputs`` without writing ``.grad``.

    The sweep stops at ``inputs``, so none of them may depend on another.
    """
    _check_scalar(loss)
    grads = ComputationGraph(loss, stop_at=inputs).propagate()
    return [grads.get(id(t), np.zeros_like(t.data)) for t in inputs]


def finite_difference_gradient(fn: Callable[[], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. every entry of ``array`` (mutated in place, restored)."""
    out = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    target = out.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        upper = fn()
        flat[i] = original - h
        lower = fn()
        flat[i] = original
        target[i] = (upper - lower) / (2 * h)
    return out
