"""Dense tensor arithmetic with reverse-mode automatic differentiation.

Values are plain ``numpy.ndarray`` objects treated as immutable: no operation in
this module writes into an array it did not allocate. A :class:`TracedValue`
wraps one such array together with the graph edges needed to back-propagate
through the operation that produced it.

Randomness comes exclusively from :func:`make_rng`, which returns a numpy
``Generator`` driven by the Philox-4x64 counter-based bit generator. Given the
same seed it yields the same stream on every platform.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from hran.errors import (
    ContractError,
    DimensionError,
    InvalidMaskError,
    NumericError,
    ParameterError,
    VocabularyError,
)

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate operations without recording graph edges (inference, finite differences)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class TracedValue:
    """A node of the computation graph.

    Leaves created with ``requires_grad=True`` are trainable parameters; every
    other leaf is a constant. ``grad`` always has the shape of ``value`` and
    reads as zeros until a backward pass deposits something into it.
    """

    __slots__ = ("value", "_grad", "parents", "backward_rule", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        self._grad = None
        self.parents: tuple = ()
        self.backward_rule = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"TracedValue(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def as_traced(x) -> TracedValue:
    if isinstance(x, TracedValue):
        return x
    return TracedValue(np.asarray(x))


def _node(value: np.ndarray, parents: Sequence[TracedValue], rule: Callable) -> TracedValue:
    out = TracedValue(value)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.parents = tuple(parents)
        out.backward_rule = rule
        out.requires_grad = True
    return out


def _require_same_shape(*args: TracedValue) -> None:
    first = args[0].shape
    for a in args[1:]:
        if a.shape != first:
            raise DimensionError(f"shape mismatch: {first} vs {a.shape}")


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- linear algebra

# Forward products use einsum rather than BLAS: BLAS kernels may round a row
# differently depending on its neighbours, which would make a row's result
# depend on how many other rows (utterances, hypotheses) share the call.


def matmul(a, b) -> TracedValue:
    """``a @ b`` for ``a`` of shape ``[..., k]`` and ``b`` of shape ``[k, n]`` or ``[k]``."""
    a, b = as_traced(a), as_traced(b)
    if a.value.ndim < 1 or b.value.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    out = np.einsum("...k,k->..." if bv.ndim == 1 else "...k,kn->...n", av, bv)
    k = bv.shape[0]

    def rule(g):
        if bv.ndim == 1:
            ga = g[..., None] * bv
            gb = av.reshape(-1, k).T @ g.reshape(-1)
        else:
            ga = g @ bv.T
            gb = av.reshape(-1, k).T @ g.reshape(-1, bv.shape[1])
        return ga, gb

    return _node(out, (a, b), rule)


def linear(x, w) -> TracedValue:
    """``x @ w.T`` for ``x`` of shape ``[..., in]`` and a weight matrix ``w`` of shape ``[out, in]``."""
    x, w = as_traced(x), as_traced(w)
    if w.value.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"cannot apply weight {w.shape} to input {x.shape}")
    xv, wv = x.value, w.value

    def rule(g):
        return g @ wv, g.reshape(-1, wv.shape[0]).T @ xv.reshape(-1, wv.shape[1])

    return _node(np.einsum("...i,oi->...o", xv, wv), (x, w), rule)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> TracedValue:
    a, b = as_traced(a), as_traced(b)
    _require_same_shape(a, b)
    return _node(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> TracedValue:
    a, b = as_traced(a), as_traced(b)
    _require_same_shape(a, b)
    return _node(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> TracedValue:
    a, b = as_traced(a), as_traced(b)
    _require_same_shape(a, b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b), lambda g: (g * bv, g * av))


def neg(a) -> TracedValue:
    a = as_traced(a)
    return _node(-a.value, (a,), lambda g: (-g,))


def scale(a, c: float) -> TracedValue:
    a = as_traced(a)
    return _node(a.value * c, (a,), lambda g: (g * c,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a) -> TracedValue:
    a = as_traced(a)
    y = _sigmoid(a.value)
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a) -> TracedValue:
    a = as_traced(a)
    y = np.tanh(a.value)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),))


def one_minus(a) -> TracedValue:
    a = as_traced(a)
    return _node(1.0 - a.value, (a,), lambda g: (-g,))


def exp(a) -> TracedValue:
    a = as_traced(a)
    y = np.exp(a.value)
    return _node(y, (a,), lambda g: (g * y,))


def log(a) -> TracedValue:
    a = as_traced(a)
    v = a.value
    return _node(np.log(v), (a,), lambda g: (g / v,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "one-minus": one_minus,
    "one_minus": one_minus,
    "exp": exp,
    "log": log,
}


def elementwise(op: str, *args) -> TracedValue:
    """Apply a named pointwise operation; all arguments must share one shape."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------- shape plumbing


def broadcast_to(a, shape: tuple) -> TracedValue:
    a = as_traced(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        v = np.broadcast_to(a.value, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}") from None
    orig = a.shape
    return _node(v, (a,), lambda g: (_sum_to(g, orig),))


def reshape(a, shape: tuple) -> TracedValue:
    a = as_traced(a)
    orig = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def concat(tensors: Sequence, axis: int = 0) -> TracedValue:
    ts = [as_traced(t) for t in tensors]
    if not ts:
        raise ContractError("concat needs at least one tensor")
    ndim = ts[0].value.ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.value.ndim != ndim or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(ts[0].shape, t.shape)) if i != ax
        ):
            raise DimensionError(f"cannot concatenate {ts[0].shape} and {t.shape} on axis {axis}")
    out = np.concatenate([t.value for t in ts], axis=ax)
    cuts = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def rule(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _node(out, ts, rule)


def stack(tensors: Sequence, axis: int = 0) -> TracedValue:
    ts = [as_traced(t) for t in tensors]
    _require_same_shape(*ts)
    out = np.stack([t.value for t in ts], axis=axis)
    ax = axis % out.ndim

    def rule(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return _node(out, ts, rule)


def select(a, index: int, axis: int = 0) -> TracedValue:
    """Slice out position ``index`` along ``axis`` (the axis is dropped)."""
    a = as_traced(a)
    ax = axis % a.value.ndim
    shape, dtype = a.shape, a.dtype

    def rule(g):
        full = np.zeros(shape, dtype=dtype)
        sl = [slice(None)] * len(shape)
        sl[ax] = index
        full[tuple(sl)] = g
        return (full,)

    return _node(np.take(a.value, index, axis=ax), (a,), rule)


def reduce_sum(a, axis: int | None = None) -> TracedValue:
    a = as_traced(a)
    shape = a.shape

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(np.sum(a.value, axis=axis), (a,), rule)


def where(cond, a, b) -> TracedValue:
    """Pick from ``a`` where the constant boolean ``cond`` holds, else from ``b``."""
    a, b = as_traced(a), as_traced(b)
    _require_same_shape(a, b)
    c = np.broadcast_to(np.asarray(cond, dtype=bool), a.shape)
    return _node(np.where(c, a.value, b.value), (a, b), lambda g: (g * c, g * ~c))


def embedding_lookup(table, ids) -> TracedValue:
    """Rows ``table[ids]``; the gradient scatters back into the looked-up rows only."""
    table = as_traced(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise VocabularyError(f"token ids must be integers, got {ids.dtype}")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = ids[(ids < 0) | (ids >= n)].flat[0]
        raise VocabularyError(f"token id {int(bad)} out of range for vocabulary of size {n}")

    def rule(g):
        full = np.zeros_like(table.value)
        np.add.at(full, ids, g)
        return (full,)

    return _node(table.value[ids], (table,), rule)


def pick(a, ids) -> TracedValue:
    """Gather ``a[..., ids[...]]`` along the last axis (one index per leading position)."""
    a = as_traced(a)
    ids = np.asarray(ids)[..., None]
    shape, dtype = a.shape, a.dtype

    def rule(g):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, ids, g[..., None], axis=-1)
        return (full,)

    return _node(np.take_along_axis(a.value, ids, axis=-1)[..., 0], (a,), rule)


def weighted_sum(weights, values) -> TracedValue:
    """``sum_n weights[..., n] * values[..., n, :]``: a convex combination when weights are a distribution."""
    w, v = as_traced(weights), as_traced(values)
    if v.shape[:-1] != w.shape:
        raise DimensionError(f"weights {w.shape} do not index values {v.shape}")
    wv, vv = w.value, v.value
    out = np.einsum("...n,...nd->...d", wv, vv)

    def rule(g):
        return np.einsum("...d,...nd->...n", g, vv), wv[..., None] * g[..., None, :]

    return _node(out, (w, v), rule)


# ---------------------------------------------------------------- normalisation


def _softmax_values(s: np.ndarray, mask: np.ndarray, axis: int) -> np.ndarray:
    filled = np.where(mask, s, -np.inf)
    mx = np.max(filled, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(mask, np.exp(filled - mx), 0.0)
    denom = np.sum(e, axis=axis, keepdims=True)
    return (e / np.where(denom == 0, 1.0, denom)).astype(s.dtype, copy=False)


def masked_softmax(scores, mask=None, axis: int = -1, allow_empty: bool = False) -> TracedValue:
    """Softmax over ``axis`` restricted to positions where ``mask`` is true.

    Masked scores are excluded from the normalising sum (never merely zeroed
    afterwards), so they receive exactly zero gradient. With ``allow_empty``
    a fully masked row yields all zeros instead of raising; batched encoders use
    that for padded utterances.
    """
    scores = as_traced(scores)
    s = scores.value
    if mask is None:
        m = np.ones(s.shape, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != s.shape:
            try:
                m = np.broadcast_to(m, s.shape)
            except ValueError:
                raise DimensionError(f"mask {m.shape} does not fit scores {s.shape}") from None
    if not allow_empty and not np.all(np.any(m, axis=axis)):
        raise InvalidMaskError("mask excludes every position of a softmax row")
    y = _softmax_values(s, m, axis)

    def rule(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _node(y, (scores,), rule)


def log_softmax(a, axis: int = -1) -> TracedValue:
    a = as_traced(a)
    v = a.value
    shifted = v - np.max(v, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    p = np.exp(out)

    def rule(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _node(out, (a,), rule)


# ---------------------------------------------------------------- differentiation


def _topological_order(root: TracedValue) -> list:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: TracedValue) -> None:
    """Accumulate ``d root / d node`` into ``node.grad`` for every reachable node.

    Contributions from one call are gathered in a private table before being
    added to the stored gradients, so calling this twice on the same graph
    exactly doubles every gradient.
    """
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    pending = {id(root): np.ones_like(root.value)}
    for node in reversed(_topological_order(root)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node._grad = g if node._grad is None else node._grad + g
        if node.backward_rule is None:
            continue
        for parent, pg in zip(node.parents, node.backward_rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


def grad_check(
    f: Callable[[], TracedValue],
    params: Iterable[TracedValue],
    step: float = 1e-5,
    tolerance: float | None = None,
) -> float:
    """Compare autodiff gradients of ``f()`` against central differences.

    ``f`` is a zero-argument closure reading the current ``value`` of each
    parameter. Returns the maximum over all coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``. When
    ``tolerance`` is given and exceeded, :class:`NumericError` names the worst
    coordinate.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    if out.value.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    backward(out)
    worst, where_ = 0.0, None
    with no_grad():
        for pi, p in enumerate(params):
            analytic = p.grad.copy()
            original = p.value
            for idx in np.ndindex(original.shape):
                vals = []
                for sign in (1.0, -1.0):
                    bumped = original.copy()
                    bumped[idx] += sign * step
                    p.value = bumped
                    v = float(f().value)
                    if not np.isfinite(v):
                        p.value = original
                        raise NumericError(f"non-finite value perturbing parameter {pi} ({p.name}) at {idx}")
                    vals.append(v)
                p.value = original
                numeric = (vals[0] - vals[1]) / (2.0 * step)
                a = float(analytic[idx])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                if err > worst:
                    worst, where_ = err, (pi, p.name, idx, a, numeric)
    if tolerance is not None and worst > tolerance:
        pi, name, idx, a, n = where_
        raise NumericError(
            f"gradient mismatch {worst:.3e} at parameter {pi} ({name}) {idx}: analytic {a!r}, numeric {n!r}"
        )
    return worst


# ---------------------------------------------------------------- randomness


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox-4x64 generator keyed by ``seed`` (via numpy's ``SeedSequence``).

    Extra integers select an independent stream, e.g. ``make_rng(seed, epoch)``.
    """
    key = np.random.SeedSequence([seed, *stream]) if stream else seed
    return np.random.Generator(np.random.Philox(key))


def gaussian_init(rng: np.random.Generator, shape, sigma: float, dtype=np.float64) -> np.ndarray:
    if not sigma > 0:
        raise ParameterError(f"standard deviation must be positive, got {sigma}")
    return (rng.standard_normal(size=tuple(shape)) * sigma).astype(dtype, copy=False)
