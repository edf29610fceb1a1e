"""Dense reverse-mode autodiff over numpy arrays.

Only the operators the relation model needs are provided. Every operator
checks that its output is finite and raises :class:`NonFiniteError` otherwise.
There is no general broadcasting: the few broadcast patterns the model uses
(row bias, row scaling, outer sum) are explicit operators.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import ConfigError, DimensionError, NonFiniteError, UsageError

DEFAULT_DTYPE = np.float64

# Optional sink for pre-activation values seen by ``relu``; used by the
# gradient checker to detect finite-difference steps that straddle a kink.
_relu_trace: list | None = None


class Tensor:
    """A node in the autodiff graph holding a value and, after backward, its adjoint."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.array(data, dtype=dtype or _infer_dtype(data))
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor initialised with non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar for the elementwise ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self):
        backward(self)


def _scalar_error():
    raise UsageError("item() requires a single-element tensor")


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
        return data.dtype
    return DEFAULT_DTYPE


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap ``x`` as a constant tensor unless it already is one."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data, parents, backward_fn, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at exactly 0 is 0."""
    x = as_tensor(x)
    if _relu_trace is not None:
        _relu_trace.append(x.data.copy())
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NonFiniteError("log of non-positive value")
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


# ------------------------------------------------------------------- algebra


def matvec(W, x) -> Tensor:
    """Matrix-vector product ``W @ x`` for ``W`` of shape (m, n) and ``x`` of shape (n,)."""
    W, x = as_tensor(W), as_tensor(x)
    if W.ndim != 2 or x.ndim != 1 or W.shape[1] != x.shape[0]:
        raise DimensionError(f"matvec: cannot multiply {W.shape} by {x.shape}")
    Wd, xd = W.data, x.data
    return _make(Wd @ xd, (W, x), lambda g: (np.outer(g, xd), Wd.T @ g), "matvec")


def matmul(A, B) -> Tensor:
    A, B = as_tensor(A), as_tensor(B)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {A.shape} by {B.shape}")
    Ad, Bd = A.data, B.data
    return _make(Ad @ Bd, (A, B), lambda g: (g @ Bd.T, Ad.T @ g), "matmul")


def transpose(A) -> Tensor:
    A = as_tensor(A)
    if A.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {A.shape}")
    return _make(A.data.T.copy(), (A,), lambda g: (g.T,), "transpose")


def dot(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim != 1:
        raise DimensionError(f"dot: expected vectors, got {x.shape}")
    _same_shape(x, y, "dot")
    xd, yd = x.data, y.data
    return _make(np.asarray(xd @ yd), (x, y), lambda g: (g * yd, g * xd), "dot")


def total(x) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    x = as_tensor(x)
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, g, dtype=x.dtype),), "sum")


def mean(x) -> Tensor:
    x = as_tensor(x)
    return scale(total(x), 1.0 / x.size)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat: nothing to concatenate")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(data, ts, back, "concat")


def stack_scalars(scalars: Sequence) -> Tensor:
    """Collect 0-d tensors into a vector."""
    ts = [as_tensor(s) for s in scalars]
    data = np.array([t.data for t in ts], dtype=ts[0].dtype).reshape(-1)
    return _make(data, ts, lambda g: tuple(np.asarray(v) for v in g), "stack")


def outer_add(u, v) -> Tensor:
    """``M[j, i] = u[j] + v[i]``."""
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or v.ndim != 1:
        raise DimensionError("outer_add: expected two vectors")
    return _make(u.data[:, None] + v.data[None, :], (u, v), lambda g: (g.sum(axis=1), g.sum(axis=0)), "outer_add")


def outer(u, v) -> Tensor:
    """``M[j, i] = u[j] * v[i]``."""
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or v.ndim != 1:
        raise DimensionError("outer: expected two vectors")
    ud, vd = u.data, v.data
    return _make(np.outer(ud, vd), (u, v), lambda g: (g @ vd, ud @ g), "outer")


def scale_rows(M, v) -> Tensor:
    """``M[j, :] * v[j]``."""
    M, v = as_tensor(M), as_tensor(v)
    if M.ndim != 2 or v.ndim != 1 or M.shape[0] != v.shape[0]:
        raise DimensionError(f"scale_rows: cannot scale {M.shape} by {v.shape}")
    Md, vd = M.data, v.data
    return _make(Md * vd[:, None], (M, v), lambda g: (g * vd[:, None], (g * Md).sum(axis=1)), "scale_rows")


def add_row(M, b) -> Tensor:
    """Add the vector ``b`` to every row of ``M``."""
    M, b = as_tensor(M), as_tensor(b)
    if M.ndim != 2 or b.ndim != 1 or M.shape[1] != b.shape[0]:
        raise DimensionError(f"add_row: cannot add {b.shape} to rows of {M.shape}")
    return _make(M.data + b.data[None, :], (M, b), lambda g: (g, g.sum(axis=0)), "add_row")


def add_scalar(x, s) -> Tensor:
    """Add the 0-d tensor ``s`` to every element of ``x``."""
    x, s = as_tensor(x), as_tensor(s)
    if s.size != 1:
        raise DimensionError(f"add_scalar: expected a scalar, got shape {s.shape}")
    sshape = s.shape
    return _make(x.data + s.data.reshape(()), (x, s), lambda g: (g, np.asarray(g.sum()).reshape(sshape)), "add_scalar")


# ------------------------------------------------------------------ softmax


def _softmax_last(x, mask):
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    peak = np.max(x, axis=-1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.exp(x - peak)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    return np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)


def softmax_rows(M, mask=None) -> Tensor:
    """Normalise each row with a max-shifted softmax.

    ``mask`` (boolean, same shape) excludes entries from the normalisation;
    excluded entries get weight 0 and a fully excluded row is all zeros.
    """
    M = as_tensor(M)
    if M.ndim != 2:
        raise DimensionError(f"softmax_rows: expected a matrix, got {M.shape}")
    if mask is not None and np.shape(mask) != M.shape:
        raise DimensionError("softmax_rows: mask shape differs from input")
    P = _softmax_last(M.data, mask)

    def back(g):
        return (P * (g - (g * P).sum(axis=1, keepdims=True)),)

    return _make(P, (M,), back, "softmax_rows")


def softmax_cols(M, mask=None) -> Tensor:
    """Normalise each column; the transpose of :func:`softmax_rows`."""
    M = as_tensor(M)
    if M.ndim != 2:
        raise DimensionError(f"softmax_cols: expected a matrix, got {M.shape}")
    P = _softmax_last(M.data.T, None if mask is None else np.asarray(mask).T).T.copy()

    def back(g):
        return (P * (g - (g * P).sum(axis=0, keepdims=True)),)

    return _make(P, (M,), back, "softmax_cols")


def log_softmax_rows(M) -> Tensor:
    M = as_tensor(M)
    if M.ndim != 2:
        raise DimensionError(f"log_softmax_rows: expected a matrix, got {M.shape}")
    x = M.data
    shifted = x - x.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    P = np.exp(out)

    def back(g):
        return (g - P * g.sum(axis=1, keepdims=True),)

    return _make(out, (M,), back, "log_softmax_rows")


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-softmax ``logits``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=int)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    return scale(total(mul(log_softmax_rows(logits), Tensor(onehot))), -1.0 / n)


# ----------------------------------------------------------------- backward


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf requiring grad."""
    if root.size != 1:
        raise UsageError(f"backward requires a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg).reshape(parent.shape)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------------- SGD


@dataclass
class SgdState:
    lr: float
    momentum: float = 0.0
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: SgdState) -> list:
    """Heavy-ball update ``v <- momentum * v + g``, ``p <- p - lr * v``.

    Returns new arrays; ``state.velocity`` is updated in place.
    """
    if state.lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {state.lr}")
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    if len(params) != len(grads) or len(params) != len(state.velocity):
        raise DimensionError("sgd_step: parameter, gradient and velocity lists differ in length")
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        v = state.velocity[i]
        if p.shape != g.shape or p.shape != v.shape:
            raise DimensionError(f"sgd_step: shape mismatch at parameter {i}")
        v = state.momentum * v + g
        state.velocity[i] = v
        out.append(p - state.lr * v)
    return out


class SGD:
    """Momentum SGD updating :class:`Tensor` parameters in place.

    ``lr=0`` is accepted here and freezes the parameters.
    """

    def __init__(self, params: Iterable[Tensor], lr=0.01, momentum=0.0):
        self.params = list(params)
        if lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {lr}")
        self.frozen = lr == 0
        self.state = SgdState(lr=lr if lr > 0 else 1.0, momentum=momentum)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.frozen:
            return
        new = sgd_step([p.data for p in self.params], grads, self.state)
        for p, d in zip(self.params, new):
            if not np.all(np.isfinite(d)):
                raise NonFiniteError("SGD step produced non-finite parameters")
            p.data = d
