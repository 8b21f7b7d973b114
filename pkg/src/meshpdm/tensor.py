"""Dense float64 arrays with reverse-mode automatic differentiation.

Eager micrograd-style engine: each operation stores its parent tensors and a
closure computing the vector-Jacobian product. ``backward`` walks the graph in
reverse topological order exactly once and accumulates into ``Tensor.grad``
(callers zero grads between steps). Every forward result is checked for
NaN/Inf and raises :class:`NumericError` rather than propagating garbage.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import NumericError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(data: np.ndarray, what: str) -> None:
    # min/max are allocation-free full-array reductions; NaN propagates to
    # both and +-Inf escapes at least one of them.
    if data.size and not (np.isfinite(data.min()) and np.isfinite(data.max())):
        raise NumericError(f"non-finite values produced by {what}")


class Tensor:
    """N-d float64 array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        # float64 by default; float32 inputs keep their precision (training
        # in 32-bit is supported, tests and oracles run in 64-bit)
        if arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        _check_finite(self.data, "tensor constructor")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        # Rebinding (never in-place) lets vjps hand over freshly built arrays
        # and views without defensive copies; stored grads are never mutated.
        self.grad = g if self.grad is None else self.grad + g

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_coerce(other), -1.0))

    def __rsub__(self, other):
        return add(_coerce(other), mul(self, -1.0))

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and not isinstance(shape[0], int) else shape)

    def exp(self):
        return exp(self)

    def sqrt(self):
        return sqrt(self)

    def clip(self, lo, hi):
        return clip(self, lo, hi)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _harmonize(a, b) -> tuple[Tensor, Tensor]:
    """Coerce operands; 0-d constants adopt the other operand's float dtype so
    scalar arithmetic never promotes a float32 graph to float64."""
    a, b = _coerce(a), _coerce(b)
    if a.data.dtype != b.data.dtype:
        if b.data.ndim == 0 and b._vjp is None and not b.requires_grad:
            b = Tensor(b.data.astype(a.data.dtype))
        elif a.data.ndim == 0 and a._vjp is None and not a.requires_grad:
            a = Tensor(a.data.astype(b.data.dtype))
    return a, b


def _result(data: np.ndarray, parents: tuple[Tensor, ...], vjp, name: str) -> Tensor:
    _check_finite(data, name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _harmonize(a, b)
    out_data = a.data + b.data

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(out_data, (a, b), vjp, "add")


def mul(a, b) -> Tensor:
    a, b = _harmonize(a, b)
    out_data = a.data * b.data

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(out_data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _harmonize(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(out_data, (a, b), vjp, "div")


def power(a, p) -> Tensor:
    a = _coerce(a)
    p = float(p)
    out_data = a.data ** p

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g * p * a.data ** (p - 1.0))

    return _result(out_data, (a,), vjp, f"power({p})")


def exp(a) -> Tensor:
    a = _coerce(a)
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _result(out_data, (a,), vjp, "exp")


def sqrt(a) -> Tensor:
    a = _coerce(a)
    out_data = np.sqrt(a.data)

    def vjp(g):
        # Guarded denominator: keeps the gradient finite when an input sits
        # exactly at zero (coincident points in distance computations).
        if a.requires_grad:
            a._accumulate(g * 0.5 / np.maximum(out_data, 1e-12))

    return _result(out_data, (a,), vjp, "sqrt")


def clip(a, lo: float, hi: float) -> Tensor:
    a = _coerce(a)
    out_data = np.clip(a.data, lo, hi)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g * ((a.data >= lo) & (a.data <= hi)))

    return _result(out_data, (a,), vjp, "clip")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    """Elementwise max(x, slope*x); the subgradient at 0 is taken as slope."""
    if slope < 0:
        raise ValueError(f"leaky_relu slope must be >= 0, got {slope}")
    a = _coerce(a)
    if not (_grad_enabled and a.requires_grad):
        return _result(np.maximum(a.data, a.data * slope), (a,), None, "leaky_relu")
    factor = np.where(a.data > 0, a.data.dtype.type(1.0), a.data.dtype.type(slope))
    out_data = a.data * factor

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g * factor)

    return _result(out_data, (a,), vjp, "leaky_relu")


# -- linear algebra -------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(out_data, (a, b), vjp, "matmul")


# -- reductions ------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_expand_reduced(g, a.shape, axis, keepdims))

    return _result(np.asarray(out_data), (a,), vjp, "sum")


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    if a.size == 0:
        raise ValueError("mean over an empty tensor")
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else a.shape[axis]

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_expand_reduced(g, a.shape, axis, keepdims) / count)

    return _result(np.asarray(out_data), (a,), vjp, "mean")


def reduce_max(a, axis=None, keepdims=False) -> Tensor:
    """Maximum reduction; the gradient is routed to the first (lowest-index) argmax."""
    a = _coerce(a)
    if a.size == 0:
        raise ValueError("max over an empty tensor")
    if axis is None:
        flat_idx = int(np.argmax(a.data))
        out_data = np.asarray(a.data.reshape(-1)[flat_idx])

        def vjp(g):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                full.reshape(-1)[flat_idx] = np.asarray(g).reshape(())
                a._accumulate(full)

        return _result(out_data, (a,), vjp, "max")

    idx = np.argmax(a.data, axis=axis)
    out_data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis)
    if not keepdims:
        out_data = np.squeeze(out_data, axis=axis)

    def vjp(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            g_arr = np.asarray(g)
            if not keepdims:
                g_arr = np.expand_dims(g_arr, axis)
            np.put_along_axis(full, np.expand_dims(idx, axis), g_arr, axis)
            a._accumulate(full)

    return _result(out_data, (a,), vjp, "max")


def batch_norm_train(x, gamma, beta, eps: float = 1e-5):
    """Batch-statistics normalization of an (n, d) input with affine scale and
    shift; one fused op with a hand-derived backward.

    Returns (output, batch_mean, biased_batch_var) where the statistics are
    plain arrays for running-average updates.
    """
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"batch norm in train mode needs n >= 2, got {n}")
    mean = x.data.mean(axis=0)
    x_hat = x.data - mean
    var = np.einsum("ij,ij->j", x_hat, x_hat) / n
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat *= inv_std
    out_data = x_hat * gamma.data
    out_data += beta.data

    def vjp(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=0))
        if gamma.requires_grad:
            gamma._accumulate(np.einsum("ij,ij->j", g, x_hat))
        if x.requires_grad:
            g_hat = g * gamma.data  # fresh array, safe to update in place
            mean_g = g_hat.mean(axis=0)
            mean_gx = np.einsum("ij,ij->j", g_hat, x_hat) / n
            g_hat -= mean_g
            g_hat -= x_hat * mean_gx
            g_hat *= inv_std
            x._accumulate(g_hat)

    out = _result(out_data, (x, gamma, beta), vjp, "batch_norm_train")
    return out, mean, var


# -- shape ops --------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    out_data = a.data.reshape(shape)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(np.asarray(g).reshape(a.shape))

    return _result(out_data, (a,), vjp, "reshape")


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_coerce(t) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(ts, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    return _result(out_data, tuple(ts), vjp, "concat")


def gather(a, indices) -> Tensor:
    """Select rows of ``a`` along axis 0 by an integer index array of any shape.

    Backward scatter-adds (duplicate indices accumulate), implemented with a
    deterministic sort + reduceat rather than np.add.at for speed.
    """
    a = _coerce(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"gather index out of range for axis-0 size {a.shape[0]}")
    out_data = a.data[idx]

    def vjp(g):
        if not a.requires_grad:
            return
        row = int(np.prod(a.shape[1:], dtype=np.intp)) if a.ndim > 1 else 1
        flat_idx = idx.reshape(-1)
        g2 = np.asarray(g).reshape(flat_idx.size, row)
        order = np.argsort(flat_idx, kind="stable")
        sorted_idx = flat_idx[order]
        starts = np.concatenate(([0], np.flatnonzero(np.diff(sorted_idx)) + 1))
        sums = np.add.reduceat(g2[order], starts, axis=0)
        full = np.zeros((a.shape[0], row), dtype=sums.dtype)
        full[sorted_idx[starts]] = sums
        a._accumulate(full.reshape(a.shape))

    return _result(out_data, (a,), vjp, "gather")


# -- backward ----------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every requires_grad leaf.

    ``loss`` must be scalar. Visits each graph node exactly once in reverse
    topological order; repeated calls keep accumulating until grads are zeroed.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad (no parameters in its graph)")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    # Leaves accumulate across calls; interior nodes start fresh each pass.
    for node in topo:
        if node._vjp is not None:
            node.grad = None
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._vjp is not None:
            node._vjp(node.grad)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None
