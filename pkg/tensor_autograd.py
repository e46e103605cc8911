#!/usr/bin/env python3

"""
Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation is a `Function` subclass with a numpy forward and
an analytic backward. Tensors produced by an operation keep a reference to the
`Function` that created them, which is enough to rebuild the computation graph
from any scalar loss and run backpropagation over it.

Only leaf tensors with requires_grad=True ever receive a `grad` buffer.
"""

import logging
import math
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
GRADCHECK_DTYPE = np.float64

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]


class ShapeError(Exception):
    """Raised when operand shapes are incompatible"""

    pass


class NumericError(Exception):
    """Raised when an operation receives non-finite input"""

    pass


class GraphError(Exception):
    """Raised when the backward contract is violated"""

    pass


class Function:
    """Base class for differentiable operations."""

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs: Any) -> "Tensor":
        """Run the forward pass and wrap the result, linking it into the graph if needed."""
        func = cls(*inputs)
        out_data = func.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = any(t.requires_grad for t in inputs)
        return Tensor(out_data, requires_grad=requires_grad, creator=func if requires_grad else None)


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation."""

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        creator: Optional[Function] = None,
        name: Optional[str] = None,
        dtype: Optional[Any] = None,
    ):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.creator = creator
        self.name = name
        self.grad: Optional[np.ndarray] = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

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
    def is_leaf(self) -> bool:
        return self.creator is None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return tensor_sum(self, axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return mean(self, axis)

    def __getitem__(self, key: Any) -> "Tensor":
        return Index.apply(self, key=key)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return Sub.apply(self, other)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return Mul.apply(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


# ---------------------------------------------------------------------------
# Elementwise and structural operations
# ---------------------------------------------------------------------------


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.shape != b.shape and not (b.ndim == 1 and a.shape[-1:] == b.shape):
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} are incompatible")
        self.bias = a.shape != b.shape
        return a + b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if self.bias:
            return grad, grad.reshape(-1, grad.shape[-1]).sum(axis=0)
        return grad, grad


class Sub(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.shape != b.shape:
            raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
        return a - b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return grad, -grad


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return grad * self.b, grad * self.a


class Scale(Function):
    def forward(self, a: np.ndarray, factor: float = 1.0) -> np.ndarray:
        self.factor = factor
        return a * factor

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad * self.factor,)


class MatMul(Function):
    """c = a @ b over the last two axes; leading axes must match exactly or b is 2-D."""

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
        if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} differ")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        grad_a = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        grad_b = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        if self.b.ndim == 2 and grad_b.ndim > 2:
            grad_b = grad_b.reshape(-1, *self.b.shape).sum(axis=0)
        return grad_a, grad_b


class Transpose(Function):
    def forward(self, a: np.ndarray, axes: Optional[Tuple[int, ...]] = None) -> np.ndarray:
        if axes is None:
            axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
        self.axes = axes
        return np.transpose(a, axes)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (np.transpose(grad, np.argsort(self.axes)),)


class Reshape(Function):
    def forward(self, a: np.ndarray, shape: Tuple[int, ...] = ()) -> np.ndarray:
        self.in_shape = a.shape
        return a.reshape(shape)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad.reshape(self.in_shape),)


class Index(Function):
    """Basic or integer-array indexing; repeated indices accumulate in backward."""

    def forward(self, a: np.ndarray, key: Any = None) -> np.ndarray:
        self.key = key
        self.in_shape = a.shape
        self.dtype = a.dtype
        return np.array(a[key])

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        out = np.zeros(self.in_shape, dtype=self.dtype)
        np.add.at(out, self.key, grad)
        return (out,)


class Concat(Function):
    def forward(self, *arrays: np.ndarray, axis: int = 0) -> np.ndarray:
        self.axis = axis
        self.sizes = [arr.shape[axis] for arr in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, ...]:
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


class Sum(Function):
    def forward(self, a: np.ndarray, axis: Optional[int] = None) -> np.ndarray:
        self.axis = axis
        self.in_shape = a.shape
        return np.asarray(a.sum(axis=axis))

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        if self.axis is not None:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.in_shape).copy(),)


class Softmax(Function):
    """Softmax over the last axis of (scale * a), stabilised by subtracting the row max."""

    def forward(self, a: np.ndarray, scale: float = 1.0) -> np.ndarray:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"softmax: non-finite input in tensor of shape {a.shape}")
        z = a * scale
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        self.out = e / e.sum(axis=-1, keepdims=True)
        self.scale = scale
        return self.out

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        y = self.out
        dot = (grad * y).sum(axis=-1, keepdims=True)
        return (y * (grad - dot) * self.scale,)


class LayerNorm(Function):
    def forward(
        self, x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6
    ) -> np.ndarray:
        if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
            raise ShapeError(
                f"layer_norm: input {x.shape} needs gamma/beta of shape {x.shape[-1:]}, "
                f"got {gamma.shape} and {beta.shape}"
            )
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.x_hat = xc * self.inv_std
        self.gamma = gamma
        return self.x_hat * gamma + beta

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        c = grad.shape[-1]
        flat_grad = grad.reshape(-1, c)
        grad_gamma = (flat_grad * self.x_hat.reshape(-1, c)).sum(axis=0)
        grad_beta = flat_grad.sum(axis=0)
        g = grad * self.gamma
        grad_x = self.inv_std * (
            g
            - g.mean(axis=-1, keepdims=True)
            - self.x_hat * (g * self.x_hat).mean(axis=-1, keepdims=True)
        )
        return grad_x, grad_gamma, grad_beta


class Gelu(Function):
    """Exact GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        self.cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
        return x * self.cdf

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        pdf = np.exp(-0.5 * self.x * self.x) / math.sqrt(2.0 * math.pi)
        return (grad * (self.cdf + self.x * pdf),)


class Relu(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad * self.mask,)


class NormalizeSum(Function):
    """w = a / sum(a) for a 1-D vector with a positive sum."""

    def forward(self, a: np.ndarray) -> np.ndarray:
        self.total = a.sum()
        self.out = a / self.total
        return self.out

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return ((grad - (grad * self.out).sum()) / self.total,)


class StraightThrough(Function):
    """
    Identity on the rows of x in the forward pass; in the backward pass each row's
    score receives the gradient it would get from x * (1 + s - stop_gradient(s)).
    """

    def forward(self, x: np.ndarray, scores: np.ndarray) -> np.ndarray:
        if scores.shape != x.shape[:1]:
            raise ShapeError(f"straight_through: scores {scores.shape} do not match rows of {x.shape}")
        self.x = x
        return np.array(x)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return grad, (grad * self.x).sum(axis=-1)


class CrossEntropy(Function):
    """-log softmax(logits)[label] for a single 1-D logit vector."""

    def forward(self, logits: np.ndarray, label: int = 0) -> np.ndarray:
        if logits.ndim != 1:
            raise ShapeError(f"cross_entropy expects a 1-D logit vector, got shape {logits.shape}")
        if not 0 <= label < logits.shape[0]:
            raise ShapeError(f"cross_entropy: label {label} outside {logits.shape[0]} classes")
        z = logits - logits.max()
        log_norm = np.log(np.exp(z).sum())
        self.probs = np.exp(z - log_norm)
        self.label = label
        return np.asarray(log_norm - z[label], dtype=logits.dtype)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        g = self.probs.copy()
        g[self.label] -= 1.0
        return (g * grad,)


# ---------------------------------------------------------------------------
# Functional API
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=float(factor))


def transpose(a: Tensor, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    return Transpose.apply(a, axes=axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def index_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    return Index.apply(a, key=np.asarray(indices, dtype=np.int64))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def tensor_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    return Sum.apply(a, axis=axis)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return scale(tensor_sum(a, axis), 1.0 / count)


def softmax_rows(m: Tensor, scale: float = 1.0) -> Tensor:
    if scale <= 0:
        raise ValueError(f"softmax scale must be positive, got {scale}")
    return Softmax.apply(m, scale=float(scale))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    if eps < 0:
        raise ValueError(f"layer_norm eps must be non-negative, got {eps}")
    return LayerNorm.apply(x, gamma, beta, eps=float(eps))


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def normalize_sum(a: Tensor) -> Tensor:
    return NormalizeSum.apply(a)


def straight_through(x: Tensor, scores: Tensor) -> Tensor:
    return StraightThrough.apply(x, scores)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    return CrossEntropy.apply(logits, label=int(label))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight (+ bias) with weight stored as [in, out]."""
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


# ---------------------------------------------------------------------------
# Graph and backpropagation
# ---------------------------------------------------------------------------


class Graph:
    """Forward operations reachable from a root, in topological order (inputs first)."""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.inputs:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)

    def leaves(self) -> List[Tensor]:
        return [node for node in self.nodes if node.is_leaf]

    def backward(self, loss: Tensor, sink: Optional[Dict[Tensor, np.ndarray]] = None) -> None:
        """
        Propagate d(loss)/d(node) through the graph.

        Args:
            loss: Scalar tensor the graph was traced from
            sink: When given, leaf gradients are accumulated here instead of into
                  `Tensor.grad`, so several graphs can run concurrently over shared leaves

        Raises:
            GraphError: If loss is not a scalar
        """
        if loss.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            logger.debug("Loss does not depend on any trainable tensor; backward is a no-op")
            return

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node.creator is None:
                _accumulate_leaf(node, grad, sink)
                continue
            input_grads = node.creator.backward(grad)
            for parent, parent_grad in zip(node.creator.inputs, input_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad


def _accumulate_leaf(
    leaf: Tensor, grad: np.ndarray, sink: Optional[Dict[Tensor, np.ndarray]]
) -> None:
    grad = np.asarray(grad, dtype=leaf.dtype).reshape(leaf.shape)
    if sink is not None:
        sink[leaf] = sink[leaf] + grad if leaf in sink else grad.copy()
    elif leaf.grad is None:
        leaf.grad = grad.copy()
    else:
        leaf.grad += grad


def backward(loss: Tensor, sink: Optional[Dict[Tensor, np.ndarray]] = None) -> Graph:
    """Trace the graph behind `loss`, backpropagate, and return the traced graph."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.from_root(loss) if loss.requires_grad else Graph([])
    graph.backward(loss, sink)
    return graph


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


def numerical_gradient(loss_fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of loss_fn() with respect to every entry of param."""
    numeric = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = numeric.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        plus = loss_fn().item()
        flat[i] = original - eps
        minus = loss_fn().item()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * eps)
    return numeric


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), 1e-12)
    return float(np.linalg.norm(analytic - numeric)) / denom


def check_gradients(
    loss_fn: Callable[[], Tensor], params: Dict[str, Tensor], eps: float = 1e-5
) -> Dict[str, float]:
    """
    Compare backpropagated gradients against central finite differences.

    Returns:
        Relative error per parameter name
    """
    for param in params.values():
        param.zero_grad()
    backward(loss_fn())
    errors = {}
    for name, param in params.items():
        analytic = param.grad if param.grad is not None else np.zeros_like(param.data)
        numeric = numerical_gradient(loss_fn, param, eps)
        errors[name] = relative_error(analytic, numeric)
        logger.debug(f"Gradient check {name}: relative error {errors[name]:.3e}")
    return errors
