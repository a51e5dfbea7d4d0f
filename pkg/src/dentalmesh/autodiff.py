"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Tensors form a DAG as ops run; backward(loss) walks it once in reverse
topological order and accumulates gradients. Rank is capped at 3 (the
networks need at most cell x neighbor x channel). Gradient tracking can be
switched off with no_grad() for inference, which also lets intermediate
buffers free eagerly.

The optimizer is AMSGrad: Adam moments plus a running elementwise maximum
of the second moment in the denominator.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .errors import NonFiniteGradientError, ShapeError

_MAX_RANK = 3
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim > _MAX_RANK:
            raise ShapeError(f"rank {self.data.ndim} exceeds maximum {_MAX_RANK}")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def gradient(self) -> np.ndarray:
        """Accumulated gradient; zeros when the tensor is unreachable."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data, parents, grad_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(
        p.requires_grad or p._grad_fn is not None for p in parents
    ):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _accumulate(parent: Tensor, piece: np.ndarray) -> None:
    if parent.grad is None:
        parent.grad = np.zeros_like(parent.data)
    parent.grad += piece


def backward(loss: Tensor) -> None:
    """Populate .grad on every tensor reachable from the scalar loss."""
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(parent) not in visited:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._grad_fn is not None and node.grad is not None:
            node._grad_fn(node.grad)


# ---------------------------------------------------------------------------
# elementwise and arithmetic ops

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data
    if data.shape != a.data.shape and a.data.size != 1 and not _bias_like(a, data.shape):
        raise ShapeError(f"add broadcast from {a.data.shape} to {data.shape}")
    if data.shape != b.data.shape and b.data.size != 1 and not _bias_like(b, data.shape):
        raise ShapeError(f"add broadcast from {b.data.shape} to {data.shape}")

    def grad_fn(g):
        _accumulate(a, _reduce_to(g, a.data.shape))
        _accumulate(b, _reduce_to(g, b.data.shape))

    return _make(data, (a, b), grad_fn)


def _bias_like(t: Tensor, out_shape) -> bool:
    # allow (C,) or (1, C) against (N, C): the only broadcasts the nets use
    shape = t.data.shape
    if len(out_shape) == 2 and shape in ((out_shape[1],), (1, out_shape[1])):
        return True
    return False


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == () or int(np.prod(shape)) == 1:
        return g.sum().reshape(shape)
    reduced = g.sum(axis=0)
    return reduced.reshape(shape)


def sub(a, b) -> Tensor:
    return add(a, mul(b, -1.0))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"mul shapes {a.data.shape} and {b.data.shape} differ")
    data = a.data * b.data

    def grad_fn(g):
        _accumulate(a, _reduce_to(g * b.data, a.data.shape))
        _accumulate(b, _reduce_to(g * a.data, b.data.shape))

    return _make(data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"div shapes {a.data.shape} and {b.data.shape} differ")
    data = a.data / b.data

    def grad_fn(g):
        _accumulate(a, _reduce_to(g / b.data, a.data.shape))
        _accumulate(b, _reduce_to(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), grad_fn)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} and {b.data.shape}")
    data = a.data @ b.data

    def grad_fn(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(data, (a, b), grad_fn)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0.0
    data = np.where(mask, x.data, 0.0)

    def grad_fn(g):
        _accumulate(x, g * mask)

    return _make(data, (x,), grad_fn)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    data = np.empty_like(x.data)
    pos = x.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    data[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        _accumulate(x, g * data * (1.0 - data))

    return _make(data, (x,), grad_fn)


def log(x) -> Tensor:
    x = _as_tensor(x)
    data = np.log(x.data)

    def grad_fn(g):
        _accumulate(x, g / x.data)

    return _make(data, (x,), grad_fn)


def softmax_rows(x) -> Tensor:
    """Row-wise softmax of a 2-D tensor; rows sum to 1."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got {x.data.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    data = ex / ex.sum(axis=1, keepdims=True)

    def grad_fn(g):
        dot = np.sum(g * data, axis=1, keepdims=True)
        _accumulate(x, data * (g - dot))

    return _make(data, (x,), grad_fn)


# ---------------------------------------------------------------------------
# shape ops

def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    data = x.data.reshape(shape)
    if data.ndim > _MAX_RANK:
        raise ShapeError(f"rank {data.ndim} exceeds maximum {_MAX_RANK}")

    def grad_fn(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _make(data, (x,), grad_fn)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            piece = np.take(g, np.arange(lo, hi), axis=axis)
            _accumulate(t, piece)

    return _make(data, tuple(tensors), grad_fn)


def gather_rows(x, idx) -> Tensor:
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows index must be 1-D, got {idx.shape}")
    data = x.data[idx]

    def grad_fn(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        np.add.at(x.grad, idx, g)

    return _make(data, (x,), grad_fn)


# ---------------------------------------------------------------------------
# pooling

def max_over_axis(x, axis: int) -> Tensor:
    """Max reduction; ties route gradient to the lowest index (argmax)."""
    x = _as_tensor(x)
    data = x.data.max(axis=axis)
    arg = x.data.argmax(axis=axis)

    def grad_fn(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        grid = np.indices(data.shape)
        index = list(grid)
        index.insert(axis, arg)
        x.grad[tuple(index)] += g

    return _make(data, (x,), grad_fn)


def global_max_pool(x) -> Tensor:
    """Column-wise max of a 2-D tensor, kept as shape (1, C)."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"global_max_pool needs a 2-D tensor, got {x.data.shape}")
    arg = x.data.argmax(axis=0)
    data = x.data[arg, np.arange(x.data.shape[1])][None, :]

    def grad_fn(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[arg, np.arange(x.data.shape[1])] += g[0]

    return _make(data, (x,), grad_fn)


def broadcast_tile(x, rows: int) -> Tensor:
    """Tile a (1, C) tensor to (rows, C)."""
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[0] != 1:
        raise ShapeError(f"broadcast_tile needs (1, C), got {x.data.shape}")
    data = np.repeat(x.data, rows, axis=0)

    def grad_fn(g):
        _accumulate(x, g.sum(axis=0, keepdims=True))

    return _make(data, (x,), grad_fn)


def reduce_sum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.data.shape).copy())
        else:
            expanded = g if keepdims else np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(expanded, x.data.shape).copy())

    return _make(data, (x,), grad_fn)


def reduce_mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    count = x.data.size if axis is None else x.data.shape[axis]
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# batch normalization

class BatchNormState:
    """Running statistics buffer for one batch-norm layer."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=np.float64)
        self.var = np.ones(channels, dtype=np.float64)
        self.steps = 0


def batch_norm(
    x,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-column batch normalization over the rows of a 2-D tensor.

    Training mode normalizes by batch statistics and folds them into the
    running buffers (momentum 0.1, unbiased variance in the buffer, biased
    in the normalization, matching common framework semantics). Inference
    mode uses the frozen buffers only. The mode flag is explicit; nothing
    switches implicitly.
    """
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"batch_norm needs a 2-D tensor, got {x.data.shape}")
    n = x.data.shape[0]
    if training:
        if n < 2:
            raise ShapeError("batch_norm training mode needs at least 2 rows")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        state.mean = (1.0 - momentum) * state.mean + momentum * mu
        state.var = (1.0 - momentum) * state.var + momentum * var * n / (n - 1)
        state.steps += 1
    else:
        mu = state.mean
        var = state.var
    inv = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu) * inv
    data = gamma.data * x_hat + beta.data

    def grad_fn(g):
        _accumulate(gamma, np.sum(g * x_hat, axis=0))
        _accumulate(beta, np.sum(g, axis=0))
        if training:
            g_hat = g * gamma.data
            dx = inv * (
                g_hat
                - g_hat.mean(axis=0)
                - x_hat * np.mean(g_hat * x_hat, axis=0)
            )
            _accumulate(x, dx)
        else:
            _accumulate(x, g * gamma.data * inv)

    return _make(data, (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# graph neighborhood op

def neighbor_max(features, graph, edge_fn) -> Tensor:
    """EdgeConv-style aggregation: max over neighbors of an edge function.

    graph is a KnnGraph or an (N, k) int array whose rows list each cell's
    neighbors (self included). edge_fn maps two (N*k, F) tensors, the
    center-minus-neighbor difference and the center feature, to an
    (N*k, C) tensor; the result is reduced to (N, C) by a per-cell max.
    """
    x = _as_tensor(features)
    nbrs = np.asarray(getattr(graph, "neighbors", graph), dtype=np.int64)
    if nbrs.ndim != 2 or nbrs.shape[0] != x.data.shape[0]:
        raise ShapeError(
            f"graph shape {nbrs.shape} does not match features {x.data.shape}"
        )
    n, k = nbrs.shape
    src = np.repeat(np.arange(n, dtype=np.int64), k)
    center = gather_rows(x, src)
    others = gather_rows(x, nbrs.reshape(-1))
    edge_out = edge_fn(sub(center, others), center)
    edge_out = _as_tensor(edge_out)
    channels = edge_out.data.shape[1]
    return max_over_axis(reshape(edge_out, (n, k, channels)), axis=1)


# ---------------------------------------------------------------------------
# optimizer

class AmsGrad:
    """AMSGrad optimizer (bias-corrected, running max of the second moment).

    Defaults: lr 1e-3, beta1 0.9, beta2 0.999, eps 1e-8. step() refuses to
    apply a non-finite gradient and names the offending parameter.
    """

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params: list[Tensor] = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.v_hat = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            g = p.gradient()
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(
                    f"non-finite gradient in parameter {p.name or i}"
                )
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            g = p.gradient()
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            np.maximum(self.v_hat[i], self.v[i], out=self.v_hat[i])
            denom = np.sqrt(self.v_hat[i]) / np.sqrt(bc2) + self.eps
            p.data -= (self.lr / bc1) * self.m[i] / denom

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Optimizer state as named arrays for checkpointing."""
        out = {"opt.t": np.array([float(self.t)])}
        for i in range(len(self.params)):
            out[f"opt.m.{i}"] = self.m[i]
            out[f"opt.v.{i}"] = self.v[i]
            out[f"opt.vhat.{i}"] = self.v_hat[i]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["opt.t"][0])
        for i in range(len(self.params)):
            self.m[i] = arrays[f"opt.m.{i}"].reshape(self.m[i].shape).copy()
            self.v[i] = arrays[f"opt.v.{i}"].reshape(self.v[i].shape).copy()
            self.v_hat[i] = arrays[f"opt.vhat.{i}"].reshape(self.v_hat[i].shape).copy()
