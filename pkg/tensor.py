"""Dense double-precision arrays with reverse-mode automatic differentiation.

Every operation returns a new ``Tensor`` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent. Calling
``backward`` on a scalar walks the recorded graph in reverse topological
order and accumulates into the ``grad`` of leaf tensors that require it.

Conventions:
    - float64 throughout
    - "same" padding pads symmetrically, the odd unit going to the right
    - max-pool ties route the gradient to the first maximum
    - a graph belongs to one thread; ``no_grad`` is thread-local
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from exceptions import ShapeError, ValidationError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """n-dimensional float64 array participating in a differentiation graph.

    Attributes:
        data: The values
        requires_grad: Whether gradients flow to (or through) this tensor
        grad: Accumulated gradient, kept on leaf tensors only
        op: Name of the operation that produced the tensor
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[BackwardFn] = None,
        op: str = "leaf"
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.grad: Optional[np.ndarray] = (
            np.zeros_like(self.data) if self.requires_grad and not _parents else None
        )

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
        return not self._parents

    def zero_grad(self) -> None:
        if self.requires_grad and self.is_leaf:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def backward(self) -> "Graph":
        return backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: BackwardFn,
    op: str
) -> Tensor:
    """Wrap an op output, recording the graph only when it is needed."""
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward_fn, op)
    return Tensor(data, op=op)


# ============================================================================
# Graph and backward pass
# ============================================================================

@dataclass
class Graph:
    """Topologically ordered nodes leading to an output (inputs first)."""

    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        """Collect every node contributing to ``output``.

        Iterative depth-first post-order, so long unrolled recurrences do
        not hit the interpreter recursion limit.
        """
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> Graph:
    """Populate leaf gradients of everything the scalar ``loss`` depends on.

    Gradients accumulate: calling this twice without ``zero_grad`` doubles
    every leaf gradient.

    Args:
        loss: Scalar tensor

    Returns:
        The traversed graph

    Raises:
        ShapeError: If the loss is not a scalar
        ValidationError: If the loss does not depend on any parameter
    """
    if loss.size != 1:
        raise ShapeError("backward", [loss.shape], "loss must be a scalar")
    if not loss.requires_grad:
        raise ValidationError("loss", loss.op, "does not depend on any tensor requiring grad")

    graph = Graph.trace(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    for node in reversed(graph.nodes):
        upstream = grads.pop(id(node), None)
        if upstream is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += upstream
            continue
        for parent, parent_grad in zip(node._parents, node._backward(upstream)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad

    return graph


# ============================================================================
# Linear algebra and convolution
# ============================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of [m, k] and [k, n]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", [a.shape, b.shape])

    def backward_fn(g: np.ndarray):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward_fn, "matmul")


def same_padding(length: int, width: int, stride: int) -> Tuple[int, int, int]:
    """Output length and (left, right) padding for "same" mode."""
    out_len = -(-length // stride)
    total = max((out_len - 1) * stride + width - length, 0)
    left = total // 2
    return out_len, left, total - left


def conv1d(x: Tensor, filters: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """1-D cross-correlation.

    Args:
        x: Input [batch, length, in_ch]
        filters: Filters [width, in_ch, out_ch]
        stride: Step between windows
        padding: "same" (out_len = ceil(length / stride)) or "valid"

    Returns:
        Tensor [batch, out_len, out_ch]

    Raises:
        ValidationError: If stride or padding is invalid
        ShapeError: If channels disagree or the filter is wider than the
            padded input
    """
    x, filters = as_tensor(x), as_tensor(filters)
    if x.ndim != 3 or filters.ndim != 3 or x.shape[2] != filters.shape[1]:
        raise ShapeError("conv1d", [x.shape, filters.shape])
    if stride < 1:
        raise ValidationError("stride", stride, "must be positive")

    batch, length, in_ch = x.shape
    width, _, out_ch = filters.shape
    if padding == "same":
        out_len, left, right = same_padding(length, width, stride)
    elif padding == "valid":
        left = right = 0
        out_len = (length - width) // stride + 1
    else:
        raise ValidationError("padding", padding, "expected 'same' or 'valid'")

    padded_len = length + left + right
    if width > padded_len:
        raise ShapeError(
            "conv1d", [x.shape, filters.shape],
            f"filter width {width} exceeds padded length {padded_len}"
        )

    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0))) if left or right else x.data
    windows = sliding_window_view(xp, width, axis=1)[:, ::stride][:, :out_len]
    cols = windows.transpose(0, 1, 3, 2).reshape(batch * out_len, width * in_ch)
    kernel = filters.data.reshape(width * in_ch, out_ch)
    out = (cols @ kernel).reshape(batch, out_len, out_ch)

    def backward_fn(g: np.ndarray):
        g2 = g.reshape(batch * out_len, out_ch)
        d_filters = (cols.T @ g2).reshape(width, in_ch, out_ch)
        d_cols = (g2 @ kernel.T).reshape(batch, out_len, width, in_ch)
        d_xp = np.zeros((batch, padded_len, in_ch))
        span = (out_len - 1) * stride + 1
        for k in range(width):
            d_xp[:, k:k + span:stride, :] += d_cols[:, :, k, :]
        return d_xp[:, left:left + length, :], d_filters

    return _result(out, (x, filters), backward_fn, "conv1d")


def maxpool1d(x: Tensor, size: int, stride: int) -> Tensor:
    """Windowed maximum over the length axis with -inf "same" padding.

    Args:
        x: Input [batch, length, ch]
        size: Window size
        stride: Step between windows

    Returns:
        Tensor [batch, ceil(length / stride), ch]
    """
    x = as_tensor(x)
    if size < 1 or stride < 1:
        raise ValidationError("maxpool", (size, stride), "size and stride must be positive")
    if x.ndim != 3:
        raise ShapeError("maxpool1d", [x.shape], "expected [batch, length, channels]")

    batch, length, channels = x.shape
    out_len, left, right = same_padding(length, size, stride)
    xp = x.data
    if left or right:
        xp = np.pad(xp, ((0, 0), (left, right), (0, 0)), constant_values=-np.inf)
    windows = sliding_window_view(xp, size, axis=1)[:, ::stride][:, :out_len]
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g: np.ndarray):
        positions = np.arange(out_len)[None, :, None] * stride + arg - left
        rows = np.broadcast_to(np.arange(batch)[:, None, None], positions.shape)
        cols = np.broadcast_to(np.arange(channels)[None, None, :], positions.shape)
        dx = np.zeros_like(x.data)
        np.add.at(dx, (rows, positions, cols), g)
        return (dx,)

    return _result(out, (x,), backward_fn, "maxpool1d")


# ============================================================================
# Elementwise
# ============================================================================

def _check_same_shape(operation: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(operation, [a.shape, b.shape])


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("mul", a, b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    x = as_tensor(x)
    active = x.data > 0
    return _result(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,), "relu")


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # tanh form stays finite for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


ELEMENTWISE_OPS: Dict[str, Callable[..., Tensor]] = {
    "add": add,
    "mul": mul,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
}


def elementwise(op: str, *operands: Tensor) -> Tensor:
    """Dispatch a pointwise op by name (add, mul, relu, tanh, sigmoid)."""
    if op not in ELEMENTWISE_OPS:
        raise ValidationError("op", op, f"expected one of {', '.join(ELEMENTWISE_OPS)}")
    return ELEMENTWISE_OPS[op](*operands)


# ============================================================================
# Structural
# ============================================================================

def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis``; shapes must agree elsewhere."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValidationError("parts", 0, "nothing to concatenate")
    ndim = parts[0].ndim
    axis = axis % ndim
    reference = parts[0].shape
    for p in parts:
        if p.ndim != ndim or any(
            p.shape[i] != reference[i] for i in range(ndim) if i != axis
        ):
            raise ShapeError("concat", [q.shape for q in parts])

    boundaries = np.cumsum([p.shape[axis] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=axis)
    return _result(out, parts, lambda g: tuple(np.split(g, boundaries, axis=axis)), "concat")


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValidationError("parts", 0, "nothing to stack")
    if any(p.shape != parts[0].shape for p in parts):
        raise ShapeError("stack", [p.shape for p in parts])
    out = np.stack([p.data for p in parts], axis=axis)

    def backward_fn(g: np.ndarray):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _result(out, parts, backward_fn, "stack")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError("reshape", [x.shape, tuple(shape)]) from e
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast ``x`` to ``shape`` (e.g. a bias vector to [batch, n])."""
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as e:
        raise ShapeError("expand", [x.shape, shape]) from e
    return _result(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "expand")


def select(x: Tensor, index: int, axis: int = 0) -> Tensor:
    """Take one position along ``axis``, dropping that axis."""
    x = as_tensor(x)
    axis = axis % x.ndim
    if not -x.shape[axis] <= index < x.shape[axis]:
        raise ShapeError("select", [x.shape], f"index {index} out of range on axis {axis}")
    slicer = [slice(None)] * x.ndim
    slicer[axis] = index
    slicer = tuple(slicer)

    def backward_fn(g: np.ndarray):
        dx = np.zeros_like(x.data)
        dx[slicer] = g
        return (dx,)

    return _result(x.data[slicer], (x,), backward_fn, "select")


def narrow(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Slice [start, stop) along ``axis``."""
    x = as_tensor(x)
    axis = axis % x.ndim
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError("narrow", [x.shape], f"range [{start}, {stop}) on axis {axis}")
    slicer = [slice(None)] * x.ndim
    slicer[axis] = slice(start, stop)
    slicer = tuple(slicer)

    def backward_fn(g: np.ndarray):
        dx = np.zeros_like(x.data)
        dx[slicer] = g
        return (dx,)

    return _result(x.data[slicer], (x,), backward_fn, "narrow")


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.ones_like(x.data) * g,), "sum")


# ============================================================================
# Normalisation and loss
# ============================================================================

def batch_norm_op(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    epsilon: float,
    mean: Optional[np.ndarray] = None,
    var: Optional[np.ndarray] = None
) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalise over every axis but the last, then apply gamma and beta.

    With ``mean``/``var`` omitted the batch statistics are used (biased
    variance) and gradients flow through them; otherwise the given
    statistics are constants.

    Returns:
        (output, mean used, variance used)
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    channels = x.shape[-1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError("batch_norm", [x.shape, gamma.shape, beta.shape])

    axes = tuple(range(x.ndim - 1))
    use_batch = mean is None or var is None
    if use_batch:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + epsilon)
    x_hat = (x.data - mean) * inv_std
    out = gamma.data * x_hat + beta.data
    count = x.size // channels

    def backward_fn(g: np.ndarray):
        d_gamma = (g * x_hat).sum(axis=axes)
        d_beta = g.sum(axis=axes)
        d_xhat = g * gamma.data
        if not use_batch:
            return d_xhat * inv_std, d_gamma, d_beta
        dx = inv_std / count * (
            count * d_xhat
            - d_xhat.sum(axis=axes)
            - x_hat * (d_xhat * x_hat).sum(axis=axes)
        )
        return dx, d_gamma, d_beta

    return _result(out, (x, gamma, beta), backward_fn, "batch_norm"), mean, var


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a plain array."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets: ArrayLike) -> Tensor:
    """Mean negative log-likelihood of the target classes.

    Args:
        logits: [batch, C] scores, C >= 2
        targets: Class index per row

    Returns:
        Scalar loss tensor
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2:
        raise ShapeError("softmax_cross_entropy", [logits.shape], "expected [batch, classes]")
    batch, n_classes = logits.shape
    if n_classes < 2:
        raise ValidationError("classes", n_classes, "need at least 2")
    if targets.shape[0] != batch:
        raise ShapeError("softmax_cross_entropy", [logits.shape, targets.shape])
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise ValidationError("targets", targets.tolist(), f"must lie in [0, {n_classes})")

    rows = np.arange(batch)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = np.mean(log_norm - shifted[rows, targets])
    probs = softmax(logits.data)

    def backward_fn(g: np.ndarray):
        d_logits = probs.copy()
        d_logits[rows, targets] -= 1.0
        return (d_logits * (g / batch),)

    return _result(np.array(loss), (logits,), backward_fn, "softmax_cross_entropy")


# ============================================================================
# Gradient checking
# ============================================================================

def finite_difference_gradient(
    f: Callable[[], float],
    tensor: Tensor,
    h: float = 1e-5
) -> np.ndarray:
    """Central-difference estimate of d f() / d tensor.

    ``f`` must recompute its value from ``tensor.data`` on every call.
    """
    grad = np.zeros_like(tensor.data)
    for index in np.ndindex(tensor.shape):
        original = tensor.data[index]
        tensor.data[index] = original + h
        f_plus = f()
        tensor.data[index] = original - h
        f_minus = f()
        tensor.data[index] = original
        grad[index] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a|| + ||n||, tiny)."""
    denominator = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-300)
    return float(np.linalg.norm(analytic - numeric) / denominator)
