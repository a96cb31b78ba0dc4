"""Dense float64 arrays with tape-based reverse-mode differentiation.

Only the op vocabulary the model needs is provided: broadcasting arithmetic,
(batched) matrix product, a row softmax with an additive mask, tanh, exp/log,
scaled softplus, concatenation, indexing and reductions.

Usage::

    w = Tensor(np.ones((3, 2)), requires_grad=True, name="w")
    with Tape() as tape:
        loss = (x @ w).sum()
    grads = tape.gradient(loss, {"w": w})

Outside an active tape ops evaluate eagerly and record nothing, which is the
fast path used for inference and finite-difference probes.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import (
    DegenerateRowError,
    DimensionError,
    EvaluationError,
    NumericError,
    ParameterDomainError,
)

SOFTPLUS_THRESHOLD = 30.0

_ids = itertools.count()
_active: list["Tape"] = []


def _frozen(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    arr.setflags(write=False)
    return arr


class Tensor:
    """Immutable float64 array that may participate in gradient recording."""

    __array_priority__ = 1000  # make ndarray <op> Tensor dispatch to Tensor

    __slots__ = ("value", "requires_grad", "name", "id")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = value if _is_frozen_f64(value) else _frozen(value)
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __float__(self):
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __rmatmul__ = lambda self, other: matmul(other, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, key: index(self, key)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return swapaxes(self, a, b)

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)


def _is_frozen_f64(value) -> bool:
    return isinstance(value, np.ndarray) and value.dtype == np.float64 and not value.flags.writeable


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@dataclass
class _Record:
    op: str
    out: Tensor
    parents: tuple[Tensor, ...]
    forward: Callable
    backward: Callable


class Tape:
    """Ordered record of primitive ops executed while the tape is active."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def gradient(self, output: Tensor, sources):
        """Reverse sweep from a scalar `output`.

        `sources` is a mapping name -> Tensor (returns a dict) or a sequence of
        Tensors (returns a list). Sources the output does not depend on get a
        zero gradient slot.
        """
        if output.size != 1:
            raise DimensionError(f"gradient needs a scalar output, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {output.id: np.ones(output.shape)}
        for rec in reversed(self.records):
            g = grads.pop(rec.out.id, None)
            if g is None:
                continue
            parent_vals = [p.value for p in rec.parents]
            parent_grads = rec.backward(g, parent_vals, rec.out.value)
            for p, pg in zip(rec.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p.id in grads:
                    grads[p.id] = grads[p.id] + pg
                else:
                    grads[p.id] = pg
        if isinstance(sources, Mapping):
            return {k: grads.get(t.id, np.zeros(t.shape)) for k, t in sources.items()}
        return [grads.get(t.id, np.zeros(t.shape)) for t in sources]

    def replay(self) -> bool:
        """Recompute every recorded op from its inputs; True if all outputs match bit for bit."""
        recomputed: dict[int, np.ndarray] = {}
        for rec in self.records:
            vals = [recomputed.get(p.id, p.value) for p in rec.parents]
            out = np.asarray(rec.forward(*vals), dtype=np.float64)
            if out.shape != rec.out.shape or not np.array_equal(out, rec.out.value):
                return False
            recomputed[rec.out.id] = out
        return True


def _apply(op: str, forward: Callable, backward: Callable, *parents) -> Tensor:
    parents = tuple(p if isinstance(p, Tensor) else Tensor(p) for p in parents)
    with np.errstate(all="ignore"):  # non-finite results are caught just below
        value = np.asarray(forward(*[p.value for p in parents]), dtype=np.float64)
    value.setflags(write=False)
    if not np.isfinite(value).all():
        raise NumericError(f"non-finite value produced by {op}")
    out = Tensor(value, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad and _active:
        rec = _Record(op, out, parents, forward, backward)
        for tape in _active:
            tape.records.append(rec)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    return _apply(
        "add", np.add,
        lambda g, v, out: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)),
        a, b,
    )


def sub(a, b) -> Tensor:
    return _apply(
        "sub", np.subtract,
        lambda g, v, out: (_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)),
        a, b,
    )


def mul(a, b) -> Tensor:
    return _apply(
        "mul", np.multiply,
        lambda g, v, out: (_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)),
        a, b,
    )


def div(a, b) -> Tensor:
    return _apply(
        "div", np.divide,
        lambda g, v, out: (
            _unbroadcast(g / v[1], v[0].shape),
            _unbroadcast(-g * v[0] / (v[1] * v[1]), v[1].shape),
        ),
        a, b,
    )


def neg(a) -> Tensor:
    return _apply("neg", np.negative, lambda g, v, out: (-g,), a)


def exp(a) -> Tensor:
    return _apply("exp", np.exp, lambda g, v, out: (g * out,), a)


def log(a) -> Tensor:
    return _apply("log", np.log, lambda g, v, out: (g / v[0],), a)


def tanh(a) -> Tensor:
    return _apply("tanh", np.tanh, lambda g, v, out: (g * (1.0 - out * out),), a)


# -- softplus -------------------------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus_forward(x: np.ndarray, phi: np.ndarray) -> np.ndarray:
    z = x / phi
    big = z > SOFTPLUS_THRESHOLD
    low = phi * np.log1p(np.exp(np.minimum(z, SOFTPLUS_THRESHOLD)))
    high = x + phi * np.log1p(np.exp(-np.maximum(z, SOFTPLUS_THRESHOLD)))
    return np.where(big, high, low)


def _softplus_backward(g, v, out):
    x, phi = v
    z = x / phi
    s = _sigmoid(z)
    # d/dphi [phi * sp(x/phi)] = sp(z) - z * sigmoid(z), and sp(z) = out / phi
    gphi = g * (out / phi - z * s)
    return _unbroadcast(g * s, x.shape), _unbroadcast(gphi, phi.shape)


def scaled_softplus(x, phi=1.0) -> Tensor:
    """phi * log(1 + exp(x / phi)), overflow-guarded above x/phi = 30."""
    if np.any(value_of(phi) <= 0):
        raise ParameterDomainError("softplus scale phi must be positive")
    return _apply("scaled_softplus", _softplus_forward, _softplus_backward, x, phi)


# -- linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")

    def backward(g, v, out):
        x, y = v
        gx = _unbroadcast(np.matmul(g, np.swapaxes(y, -1, -2)), x.shape)
        if y.ndim == 2 and x.ndim > 2:
            # fold the batch axes into one product instead of summing per-batch products
            gy = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gy = _unbroadcast(np.matmul(np.swapaxes(x, -1, -2), g), y.shape)
        return gx, gy

    return _apply("matmul", np.matmul, backward, a, b)


def masked_softmax_rows(scores, mask) -> Tensor:
    """Softmax over the last axis restricted to entries where `mask` is True.

    Masked entries come out as exact zeros. Every row needs at least one
    unmasked entry.
    """
    scores = as_tensor(scores)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    if not np.all(mask.any(axis=-1)):
        raise DegenerateRowError("softmax row with every entry masked")

    def forward(s):
        m = np.max(np.where(mask, s, -np.inf), axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, s, m) - m), 0.0)
        return e / e.sum(axis=-1, keepdims=True)

    def backward(g, v, out):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _apply("masked_softmax_rows", forward, backward, scores)


# -- shape ops and reductions -----------------------------------------------------

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g, v, out):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(v))
        )

    return _apply("concat", lambda *xs: np.concatenate(xs, axis=ax), backward, *tensors)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    def backward(g, v, out):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, v[0].shape).copy(),)

    return _apply("sum", lambda x: np.sum(x, axis=axis, keepdims=keepdims), backward, a)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return reduce_sum(a, axis=axis, keepdims=keepdims) / float(count)


def reshape(a, shape) -> Tensor:
    return _apply(
        "reshape", lambda x: np.reshape(x, shape),
        lambda g, v, out: (np.reshape(g, v[0].shape),), a,
    )


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    return _apply(
        "swapaxes", lambda x: np.swapaxes(x, ax1, ax2),
        lambda g, v, out: (np.swapaxes(g, ax1, ax2),), a,
    )


def index(a, key) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate in the backward pass."""
    if isinstance(key, Tensor):
        raise TypeError("index with an integer array, not a Tensor")

    def backward(g, v, out):
        full = np.zeros(v[0].shape)
        np.add.at(full, key, g)
        return (full,)

    return _apply("index", lambda x: x[key], backward, a)


def take_rows(table, idx) -> Tensor:
    """table[idx] along the first axis (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.intp)
    return index(table, idx)


def take_along_last(a, idx) -> Tensor:
    """Gather a[..., idx[..., c]] with idx sharing a's leading extents."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape[:-1] != a.shape[:-1]:
        raise DimensionError(f"gather index {idx.shape} does not match leading extents of {a.shape}")
    lead = np.meshgrid(*[np.arange(s) for s in idx.shape[:-1]], indexing="ij", sparse=True)
    key = tuple(x[..., None] for x in lead) + (idx,)
    return index(a, key)


# -- finite-difference checking ---------------------------------------------------

@dataclass
class GradCheckReport:
    worst_rel_error: float
    worst_param: str | None
    per_param: dict[str, float] = field(default_factory=dict)
    eps: float = 1e-5

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst_rel_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    diff = np.linalg.norm(np.ravel(analytic - numeric))
    scale = max(np.linalg.norm(np.ravel(analytic)), np.linalg.norm(np.ravel(numeric)), floor)
    return float(diff / scale)


def grad_check(
    fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
) -> GradCheckReport:
    """Compare tape gradients of `fn(params)` with central differences.

    The error for each parameter is the norm-wise relative error over all of
    its entries; the report carries the worst one.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    params = {k: (p if p.requires_grad else Tensor(p.value, requires_grad=True, name=k))
              for k, p in params.items()}
    with Tape() as tape:
        loss = fn(params)
    if not np.isfinite(loss.value).all():
        raise EvaluationError("loss is not finite")
    analytic = tape.gradient(loss, params)

    def probe(name, values):
        try:
            out = fn({**params, name: Tensor(values, requires_grad=True, name=name)})
        except NumericError as exc:
            raise EvaluationError(f"loss evaluation failed while probing {name}: {exc}") from exc
        return float(out.value)

    per_param = {}
    for name, p in params.items():
        base = p.value
        numeric = np.zeros(base.shape)
        for pos in np.ndindex(base.shape):
            up = base.copy()
            up[pos] += eps
            down = base.copy()
            down[pos] -= eps
            numeric[pos] = (probe(name, up) - probe(name, down)) / (2.0 * eps)
        per_param[name] = relative_error(analytic[name], numeric)
    worst = max(per_param, key=per_param.get) if per_param else None
    return GradCheckReport(
        worst_rel_error=per_param[worst] if worst else 0.0,
        worst_param=worst,
        per_param=per_param,
        eps=eps,
    )
