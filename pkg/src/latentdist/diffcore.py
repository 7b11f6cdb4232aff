"""Small reverse-mode differentiation engine over dense numpy arrays.

Only the handful of operations the training losses and networks need are
provided. Every op returns a new :class:`Tensor`; when any input requires a
gradient the op records a closure that maps the output gradient back to
its inputs, and :func:`backward` replays those closures in reverse
topological order.

Conventions
-----------
* Values default to float64. Pass float32 arrays explicitly for speed runs.
* relu/prelu use the negative-side slope as the subgradient at exactly 0.
* In checked mode (:func:`checked_mode`) every op result is tested for
  NaN/Inf, ``log`` rejects non-positive input and ``row_l2_normalize``
  rejects zero rows.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DiffError",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "checked_mode",
    "is_checked",
    "apply",
    "backward",
    "stop_gradient",
    "grad_check",
    "affine",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "square",
    "relu",
    "prelu",
    "sigmoid",
    "log",
    "exp",
    "row_softmax",
    "row_log_softmax",
    "row_l2_normalize",
    "mean",
    "sum",
    "concat_rows",
    "concat_cols",
    "frobenius_norm_sq",
    "masked_select",
]

# rows with a norm below this are treated as zero by row_l2_normalize
NORM_EPS = 1e-12


class DiffError(Exception):
    """Base class for errors raised by the engine."""


class ShapeError(DiffError, ValueError):
    pass


class DomainError(DiffError, ValueError):
    """Input outside the domain of an op (log of <= 0, zero-norm row)."""


class NonFiniteError(DiffError, FloatingPointError):
    pass


_CHECKED: contextvars.ContextVar[bool] = contextvars.ContextVar("checked", default=False)


@contextlib.contextmanager
def checked_mode(enabled: bool = True):
    token = _CHECKED.set(enabled)
    try:
        yield
    finally:
        _CHECKED.reset(token)


def is_checked() -> bool:
    return _CHECKED.get()


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype not in (np.float64, np.float32):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A node in the computation graph.

    ``grad`` is allocated lazily by :func:`backward` and always has the
    shape of ``value``.
    """

    __slots__ = ("value", "grad", "requires_grad", "op", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = _as_array(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.value.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _CHECKED.get() and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.name = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _require_2d(x: Tensor, op: str) -> None:
    if x.ndim != 2:
        raise ShapeError(f"{op} expects a 2-D input, got shape {x.shape}")


# --------------------------------------------------------------------------
# elementwise


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "add")
    return _make(a.value + b.value, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.value - b.value, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "mul")
    return _make(a.value * b.value, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def square(x) -> Tensor:
    x = _lift(x)
    return _make(x.value * x.value, "square", (x,), lambda g: (2.0 * x.value * g,))


def relu(x) -> Tensor:
    x = _lift(x)
    pos = x.value > 0
    return _make(np.where(pos, x.value, 0.0), "relu", (x,), lambda g: (np.where(pos, g, 0.0),))


def prelu(x, slope) -> Tensor:
    """max(x, 0) + slope * min(x, 0) with a single scalar slope."""
    x, slope = _lift(x), _lift(slope)
    if slope.value.size != 1:
        raise ShapeError(f"prelu slope must be a scalar, got shape {slope.shape}")
    s = slope.value.reshape(())
    pos = x.value > 0
    out = np.where(pos, x.value, s * x.value)

    def back(g):
        gx = np.where(pos, g, s * g)
        gs = np.sum(np.where(pos, 0.0, x.value * g))
        return gx, np.reshape(gs, slope.shape)

    return _make(out, "prelu", (x, slope), back)


def sigmoid(x) -> Tensor:
    x = _lift(x)
    v = x.value
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def log(x) -> Tensor:
    x = _lift(x)
    if _CHECKED.get() and np.any(x.value <= 0):
        raise DomainError("log of a non-positive value")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.value)
    return _make(out, "log", (x,), lambda g: (g / x.value,))


def exp(x) -> Tensor:
    x = _lift(x)
    out = np.exp(x.value)
    return _make(out, "exp", (x,), lambda g: (g * out,))


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _require_2d(a, "matmul")
    _require_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return _make(a.value @ b.value, "matmul", (a, b),
                 lambda g: (g @ b.value.T, a.value.T @ g))


def transpose(x) -> Tensor:
    x = _lift(x)
    _require_2d(x, "transpose")
    return _make(x.value.T, "transpose", (x,), lambda g: (g.T,))


def affine(x, W, b) -> Tensor:
    """x @ W + b for a batch x of shape (N, in), W (in, out), b (out,)."""
    x, W, b = _lift(x), _lift(W), _lift(b)
    _require_2d(x, "affine")
    _require_2d(W, "affine")
    if x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"affine: x{x.shape} W{W.shape} b{b.shape}")
    out = x.value @ W.value + b.value
    return _make(out, "affine", (x, W, b),
                 lambda g: (g @ W.value.T, x.value.T @ g, g.sum(axis=0)))


# --------------------------------------------------------------------------
# row-wise normalisations


def row_softmax(x) -> Tensor:
    x = _lift(x)
    _require_2d(x, "row_softmax")
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (out * (g - np.sum(g * out, axis=1, keepdims=True)),)

    return _make(out, "row_softmax", (x,), back)


def row_log_softmax(x) -> Tensor:
    x = _lift(x)
    _require_2d(x, "row_log_softmax")
    z = x.value - x.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def back(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _make(out, "row_log_softmax", (x,), back)


def row_l2_normalize(x) -> Tensor:
    """Scale each row to unit L2 norm. Zero rows map to zero rows with zero gradient."""
    x = _lift(x)
    _require_2d(x, "row_l2_normalize")
    norm = np.sqrt(np.sum(x.value * x.value, axis=1, keepdims=True))
    small = norm < NORM_EPS
    if _CHECKED.get() and np.any(small):
        raise DomainError("row_l2_normalize of a zero-norm row")
    safe = np.where(small, 1.0, norm)
    out = np.where(small, 0.0, x.value / safe)

    def back(g):
        gx = (g - out * np.sum(g * out, axis=1, keepdims=True)) / safe
        return (np.where(small, 0.0, gx),)

    return _make(out, "row_l2_normalize", (x,), back)


# --------------------------------------------------------------------------
# reductions and reshaping


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _lift(x)
    out = np.sum(x.value, axis=axis, keepdims=axis is not None)

    def back(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), "sum", (x,), back)


def mean(x, axis: int | None = None) -> Tensor:
    x = _lift(x)
    count = x.value.size if axis is None else x.shape[axis]
    out = np.mean(x.value, axis=axis, keepdims=axis is not None)

    def back(g):
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(np.asarray(out), "mean", (x,), back)


def frobenius_norm_sq(x) -> Tensor:
    x = _lift(x)
    return _make(np.asarray(np.sum(x.value * x.value)), "frobenius_norm_sq", (x,),
                 lambda g: (2.0 * g * x.value,))


def concat_rows(parts: Sequence) -> Tensor:
    parts = [_lift(p) for p in parts]
    for p in parts:
        _require_2d(p, "concat_rows")
    if len({p.shape[1] for p in parts}) != 1:
        raise ShapeError("concat_rows: column counts differ")
    edges = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        return tuple(g[edges[i]:edges[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.value for p in parts], axis=0), "concat_rows", parts, back)


def concat_cols(parts: Sequence) -> Tensor:
    parts = [_lift(p) for p in parts]
    for p in parts:
        _require_2d(p, "concat_cols")
    if len({p.shape[0] for p in parts}) != 1:
        raise ShapeError("concat_cols: row counts differ")
    edges = np.cumsum([0] + [p.shape[1] for p in parts])

    def back(g):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.value for p in parts], axis=1), "concat_cols", parts, back)


def masked_select(x, mask) -> Tensor:
    """Select entries of ``x`` where ``mask`` is true.

    A 1-D boolean mask over the rows of a 2-D input selects whole rows and
    keeps the result 2-D; a mask with the full shape of ``x`` returns the
    selected entries as a 1-D tensor.
    """
    x = _lift(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape == x.shape:
        pass
    elif x.ndim == 2 and mask.shape == (x.shape[0],):
        pass
    else:
        raise ShapeError(f"masked_select: mask {mask.shape} does not fit input {x.shape}")

    def back(g):
        gx = np.zeros_like(x.value)
        gx[mask] = g
        return (gx,)

    return _make(x.value[mask], "masked_select", (x,), back)


def stop_gradient(x) -> Tensor:
    """Same values (shared, not copied); a constant as far as backward is concerned."""
    x = _lift(x)
    out = Tensor.__new__(Tensor)
    out.value = x.value
    out.grad = None
    out.name = None
    out.op = "stop_gradient"
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    return out


_OPS: dict[str, Callable[..., Tensor]] = {
    "affine": affine,
    "matmul": matmul,
    "transpose": transpose,
    "add": add,
    "sub": sub,
    "mul": mul,
    "square": square,
    "relu": relu,
    "prelu": prelu,
    "sigmoid": sigmoid,
    "log": log,
    "exp": exp,
    "row_softmax": row_softmax,
    "row_log_softmax": row_log_softmax,
    "row_l2_normalize": row_l2_normalize,
    "mean": mean,
    "sum": sum,
    "concat_rows": lambda *xs: concat_rows(xs),
    "concat_cols": lambda *xs: concat_cols(xs),
    "frobenius_norm_sq": frobenius_norm_sq,
    "masked_select": masked_select,
    "stop_gradient": stop_gradient,
}


def apply(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch by op name, e.g. ``apply("affine", x, W, b)``."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}") from None
    return fn(*inputs, **kwargs)


# --------------------------------------------------------------------------
# differentiation


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf that requires it."""
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topological_order(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


def grad_check(
    function: Callable[..., Tensor],
    point: np.ndarray | Sequence[np.ndarray],
    step: float = 1e-5,
) -> float:
    """Largest |analytic - central difference| / max(1, |central difference|).

    ``function`` receives one leaf Tensor per array in ``point`` and must
    return a scalar Tensor.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    arrays = [np.array(point, dtype=np.float64)] if isinstance(point, np.ndarray) else [
        np.array(p, dtype=np.float64) for p in point
    ]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = function(*leaves)
    if out.value.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    backward(out)

    def evaluate(values: Iterable[np.ndarray]) -> float:
        return function(*[Tensor(v) for v in values]).item()

    worst = 0.0
    for i, base in enumerate(arrays):
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i][idx] += step
            minus[i][idx] -= step
            numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * step)
            err = abs(analytic[idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
