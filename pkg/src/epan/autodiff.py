"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array plus an optional gradient slot. Operations
record their inputs and a backward closure on the output tensor; calling
``backward()`` on a scalar builds the tape (a topological ordering of the
graph) and replays it in reverse, accumulating gradients into every
``requires_grad`` tensor reachable from the loss.

Conventions fixed here:

- 64-bit floats are the default and the only mode in which finite-difference
  verification is meaningful; 32-bit is permitted for training speed.
- Tensors are immutable once produced by an op, except for the ``grad`` slot.
  A graph and its tensors belong to one worker between forward and backward.
- Broadcasting follows numpy; backward sums gradients over broadcast axes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, UsageError

DEFAULT_DTYPE = np.float64


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


class Tensor:
    """N-dimensional real array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    # -- structure ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- backward ----------------------------------------------------------

    def backward(self) -> None:
        """Populate gradients of everything reachable from this scalar."""
        if self.size != 1:
            raise UsageError(
                f"backward() needs a scalar loss, got shape {self.shape}"
            )
        order = tape(self)
        for t in order:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + np.ones_like(self.data)
        for t in reversed(order):
            if t._backward_fn is not None and t.grad is not None:
                t._backward_fn(t.grad)


def tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered op record ending at ``root``.

    Inputs precede the ops that consume them; replaying the reverse order
    visits each recorded op exactly once.
    """
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


# -- op plumbing -------------------------------------------------------------


def _make(data: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], None] | None) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accum(t: Tensor, grad: np.ndarray) -> None:
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += grad.astype(t.data.dtype, copy=False)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# -- arithmetic ---------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def div(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a constant exponent."""
    out_data = a.data ** exponent

    def backward(g):
        _accum(a, g * exponent * a.data ** (exponent - 1))

    return _make(out_data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _make(out_data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def maximum(a: Tensor, b) -> Tensor:
    """Elementwise max; at exact ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    out_data = np.where(pick_a, a.data, b.data)

    def backward(g):
        _accum(a, _unbroadcast(np.where(pick_a, g, 0.0), a.shape))
        _accum(b, _unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return _make(out_data, (a, b), backward)


# -- reductions / reshaping ---------------------------------------------------


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _make(out_data, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return div(tensor_sum(a, axis=axis, keepdims=keepdims), float(count))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(out_data, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    out_data = a.data.transpose(axes)

    def backward(g):
        if axes is None:
            _accum(a, g.transpose())
        else:
            _accum(a, g.transpose(np.argsort(axes)))

    return _make(out_data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    if any(t.shape[axis] == 0 for t in tensors):
        raise DimensionError("concat along a zero-length axis")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(out_data, tensors, backward)


def take(a: Tensor, flat_indices) -> Tensor:
    """Gather elements of ``a`` (C-order flattened) at ``flat_indices``."""
    idx = np.asarray(flat_indices, dtype=np.intp)
    out_data = a.data.reshape(-1)[idx]

    def backward(g):
        if a.requires_grad:
            buf = np.zeros(a.size, dtype=a.data.dtype)
            np.add.at(buf, idx, g.reshape(-1))
            _accum(a, buf.reshape(a.shape))

    return _make(out_data, (a,), backward)


# -- operator sugar -----------------------------------------------------------

Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(self, other)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: sub(as_tensor(other), self)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(self, other)
Tensor.__truediv__ = lambda self, other: div(self, as_tensor(other))
Tensor.__rtruediv__ = lambda self, other: div(as_tensor(other), self)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__pow__ = lambda self, exponent: power(self, exponent)
Tensor.sum = tensor_sum
Tensor.mean = mean
Tensor.reshape = reshape


# -- finite-difference verification -------------------------------------------


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
    refine_eps: float | None = None,
) -> float:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f`` is a deterministic function of ``x`` (a tensor or a sequence of
    tensors) returning a taped scalar; it is called as ``f(*tensors)`` and
    perturbations are applied to the tensors in place, so ``f`` may also just
    close over them and ignore its arguments. Returns the max over checked
    elements of ``|analytic - numeric| / max(1, |analytic|)``.

    ``sample`` limits the check to that many randomly chosen elements per
    tensor (all elements when None); coverage then comes from running the
    check under many seeds.

    ``refine_eps`` re-measures any element whose error exceeds 1e-4 with the
    smaller step. Piecewise-linear graphs (relu, max selection, bilinear
    cells) have kinks where a central stencil is invalid; a narrower stencil
    resolves those probes, while a genuinely wrong analytic gradient fails at
    every step size.
    """
    if eps <= 0:
        raise UsageError("grad_check needs eps > 0")
    xs = [x] if isinstance(x, Tensor) else list(x)

    def evaluate() -> Tensor:
        out = f(*xs)
        if not isinstance(out, Tensor) or out.size != 1:
            raise UsageError("grad_check target must return a scalar Tensor")
        if not np.isfinite(out.data).all():
            raise NumericError("non-finite loss during grad_check")
        return out

    for t in xs:
        t.requires_grad = True
        t.grad = None
    loss = evaluate()
    loss.backward()
    analytic = [np.array(t.grad, copy=True) for t in xs]

    worst = 0.0
    for t, ana in zip(xs, analytic):
        flat = t.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        if sample is None or sample >= flat.size:
            indices: Iterable[int] = range(flat.size)
        else:
            indices = (rng or np.random.default_rng()).choice(
                flat.size, size=sample, replace=False
            )
        def probe(i: int, step: float) -> float:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = evaluate().item()
            flat[i] = orig - step
            f_minus = evaluate().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            if not np.isfinite(numeric):
                raise NumericError(f"non-finite finite difference at element {i}")
            return abs(ana_flat[i] - numeric) / max(1.0, abs(ana_flat[i]))

        for i in indices:
            rel = probe(i, eps)
            if refine_eps is not None and rel > 1e-4:
                rel = probe(i, refine_eps)
            worst = max(worst, rel)
    return worst
