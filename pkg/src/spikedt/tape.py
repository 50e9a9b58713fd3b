"""Reverse-mode automatic differentiation over dense float64 arrays.

Tensors wrap numpy arrays and may be attached to a Tape. The tape is
rebuilt on every forward pass (define-by-run): each operation records an
adjoint closure, and ``backward`` replays the records in reverse to
accumulate gradients. The one non-standard piece is the custom-gradient
threshold, whose hard binary forward is paired with a smooth surrogate
derivative; a process-wide smoothing switch swaps the forward for the
surrogate's antiderivative so whole graphs can be checked against finite
differences.

Everything is float64: the finite-difference tolerances used throughout
the test suite are not reliable in single precision.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

Array = np.ndarray


class TapeError(ValueError):
    """Tape misuse: mixed tapes, non-scalar loss, and similar."""


_SMOOTH_THRESHOLDS = False


@contextmanager
def surrogate_smoothing():
    """Replace hard thresholds by their surrogate antiderivative.

    Inside this context the graph is differentiable end to end, so central
    finite differences agree with ``backward``. Used only by gradient
    checks; never enable during training or evaluation.
    """
    global _SMOOTH_THRESHOLDS
    prev = _SMOOTH_THRESHOLDS
    _SMOOTH_THRESHOLDS = True
    try:
        yield
    finally:
        _SMOOTH_THRESHOLDS = prev


def smoothing_active() -> bool:
    return _SMOOTH_THRESHOLDS


class Tensor:
    """Dense float64 array, optionally attached to a tape node.

    A detached tensor (``tape is None``) behaves as a constant: it flows
    through operations but receives no gradient.
    """

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int = -1):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

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
    def attached(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" node={self.node}" if self.attached else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar; scalars and arrays lift to detached constants
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

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered operation record for one forward pass.

    Nodes are appended in execution order, which is already a topological
    order, so the reverse sweep visits every consumer before its producer.
    Gradient accumulators live in the map returned by ``backward`` and are
    created zero for every pass.
    """

    __slots__ = ("_parents", "_adjoints", "_kinds")

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._adjoints: list[Callable[[Array], Sequence[Array | None]] | None] = []
        self._kinds: list[str] = []

    def __len__(self) -> int:
        return len(self._parents)

    def leaf(self, data) -> Tensor:
        """Attach ``data`` (typically a parameter) as a differentiable leaf."""
        node = len(self._parents)
        self._parents.append(())
        self._adjoints.append(None)
        self._kinds.append("leaf")
        return Tensor(data, self, node)


def record(
    kind: str,
    inputs: Sequence[Tensor],
    result: Array,
    adjoint: Callable[[Array], Sequence[Array | None]],
) -> Tensor:
    """Record one operation and return its tape-attached result.

    ``adjoint`` maps the gradient of ``result`` to per-input gradients,
    aligned with ``inputs`` (entries for detached inputs are ignored and
    may be None). If no input is attached, nothing is recorded and the
    result is a plain constant, which makes gradient-free inference free
    of tape overhead.
    """
    tape = None
    for t in inputs:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise TapeError(f"op '{kind}' mixes tensors from different tapes")
    if tape is None:
        return Tensor(result)
    node = len(tape._parents)
    tape._parents.append(
        tuple(
            t.node if isinstance(t, Tensor) and t.tape is tape else -1 for t in inputs
        )
    )
    tape._adjoints.append(adjoint)
    tape._kinds.append(kind)
    return Tensor(result, tape, node)


class GradientMap:
    """Gradients from one backward pass, keyed by tape node."""

    def __init__(self, tape: Tape, grads: dict[int, Array]):
        self._tape = tape
        self._grads = grads

    def grad(self, t: Tensor) -> Array:
        """Gradient of the loss w.r.t. ``t`` (zeros if the node is unused)."""
        if t.tape is not self._tape:
            raise TapeError("tensor does not belong to the differentiated tape")
        g = self._grads.get(t.node)
        return np.zeros_like(t.data) if g is None else g

    def __contains__(self, t: Tensor) -> bool:
        return t.tape is self._tape and t.node in self._grads


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> GradientMap:
    """Reverse sweep from a scalar loss.

    When ``wrt`` is given, gradients of intermediate nodes are dropped as
    soon as they have been propagated, keeping only the requested ones
    (plus leaves); this bounds memory during training.
    """
    if not isinstance(loss, Tensor) or not loss.attached:
        raise TapeError("loss is not attached to a tape")
    if loss.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    keep: set[int] | None = None
    if wrt is not None:
        keep = {t.node for t in wrt if t.tape is tape}
    grads: dict[int, Array] = {loss.node: np.ones_like(loss.data)}
    for node in range(loss.node, -1, -1):
        g = grads.get(node)
        if g is None:
            continue
        fn = tape._adjoints[node]
        if fn is None:  # leaf
            continue
        parents = tape._parents[node]
        for pid, gi in zip(parents, fn(g)):
            if pid < 0 or gi is None:
                continue
            acc = grads.get(pid)
            grads[pid] = gi if acc is None else acc + gi
        if keep is not None and node not in keep and node != loss.node:
            del grads[node]
    return GradientMap(tape, grads)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    ash, bsh = a.shape, b.shape

    def adjoint(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return record("add", (a, b), out, adjoint)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    ash, bsh = a.shape, b.shape

    def adjoint(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return record("sub", (a, b), out, adjoint)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def adjoint(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return record("mul", (a, b), out, adjoint)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise TapeError("matmul expects tensors with ndim >= 2")
    out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def adjoint(g):
        ga = np.matmul(g, bd.swapaxes(-1, -2))
        gb = np.matmul(ad.swapaxes(-1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return record("matmul", (a, b), out, adjoint)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def adjoint(g):
        return (np.transpose(g, inv),)

    return record("transpose", (a,), out, adjoint)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    ash = a.shape

    def adjoint(g):
        return (g.reshape(ash),)

    return record("reshape", (a,), out, adjoint)


def tile(a, reps) -> Tensor:
    a = as_tensor(a)
    reps = (reps,) if isinstance(reps, int) else tuple(reps)
    out = np.tile(a.data, reps)
    ash = a.shape

    def adjoint(g):
        nd = max(len(ash), len(reps))
        shape_p = (1,) * (nd - len(ash)) + tuple(ash)
        reps_p = (1,) * (nd - len(reps)) + reps
        g = g.reshape(tuple(x for r, s in zip(reps_p, shape_p) for x in (r, s)))
        g = g.sum(axis=tuple(range(0, 2 * nd, 2)))
        return (g.reshape(ash),)

    return record("tile", (a,), out, adjoint)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def adjoint(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", ts, out, adjoint)


def index_select(a, axis: int, indices) -> Tensor:
    """Gather along ``axis``; the adjoint scatter-adds into zeros."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)
    ash = a.shape

    def adjoint(g):
        acc = np.zeros(ash, dtype=np.float64)
        acc_m = np.moveaxis(acc, axis, 0)
        np.add.at(acc_m, idx, np.moveaxis(g, axis, 0))
        return (acc,)

    return record("index_select", (a,), out, adjoint)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = expit(a.data)

    def adjoint(g):
        return (g * y * (1.0 - y),)

    return record("sigmoid", (a,), y, adjoint)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)

    def adjoint(g):
        return (g * (1.0 - y * y),)

    return record("tanh", (a,), y, adjoint)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0)

    def adjoint(g):
        return (np.where(mask, g, 0.0),)

    return record("relu", (a,), out, adjoint)


def sin(a) -> Tensor:
    a = as_tensor(a)
    out = np.sin(a.data)
    ad = a.data

    def adjoint(g):
        return (g * np.cos(ad),)

    return record("sin", (a,), out, adjoint)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def adjoint(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return record("softmax", (a,), y, adjoint)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data
    gshape, bshape = gamma.shape, beta.shape
    gdata = gamma.data

    def adjoint(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgamma = _unbroadcast((g * xhat).sum(axis=reduce_axes), gshape)
        dbeta = _unbroadcast(g.sum(axis=reduce_axes), bshape)
        dxhat = g * gdata
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return record("layer_norm", (x, gamma, beta), out, adjoint)


def masked_fill(a, mask: Array, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value`` (no grad there)."""
    a = as_tensor(a)
    m = np.asarray(mask, dtype=bool)
    out = np.where(m, value, a.data)
    ash = a.shape

    def adjoint(g):
        return (_unbroadcast(np.where(m, 0.0, g), ash),)

    return record("masked_fill", (a,), out, adjoint)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    ash = a.shape

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, ash).copy(),)

    return record("sum", (a,), out, adjoint)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    ash = a.shape
    n = a.size if axis is None else np.prod([ash[i] for i in np.atleast_1d(axis)])

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, ash).copy(),)

    return record("mean", (a,), out, adjoint)


def mse(pred, target, weight: Array | None = None, denom: float | None = None) -> Tensor:
    """Weighted squared-error reduction to a scalar.

    Computes sum(weight * (pred - target)**2) / denom. With the defaults
    (weight of ones, denom = element count) this is the plain mean squared
    error; a 0/1 weight with denom = number of kept entries masks padding
    out of the mean.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    w = np.ones_like(pred.data) if weight is None else np.broadcast_to(
        np.asarray(weight, dtype=np.float64), pred.shape
    )
    d = float(pred.size) if denom is None else float(denom)
    diff = pred.data - target.data
    out = np.asarray((w * diff * diff).sum() / d)
    tshape = target.shape

    def adjoint(g):
        base = g * 2.0 * w * diff / d
        return base, _unbroadcast(-base, tshape)

    return record("mse", (pred, target), out, adjoint)


def cross_entropy_logits(
    logits, targets: Array, weight: Array | None = None, denom: float | None = None
) -> Tensor:
    """Weighted cross-entropy between row logits and integer class targets.

    ``logits`` is (rows, classes); ``targets`` holds class indices per row.
    Returns sum(weight_i * nll_i) / denom, with denom defaulting to the
    number of rows.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise TapeError("cross_entropy_logits expects 2-D logits")
    idx = np.asarray(targets, dtype=np.intp)
    rows = logits.shape[0]
    w = np.ones(rows) if weight is None else np.asarray(weight, dtype=np.float64)
    d = float(rows) if denom is None else float(denom)
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    se = e.sum(axis=1, keepdims=True)
    probs = e / se
    lse = m[:, 0] + np.log(se[:, 0])
    nll = lse - z[np.arange(rows), idx]
    out = np.asarray((w * nll).sum() / d)

    def adjoint(g):
        dz = probs.copy()
        dz[np.arange(rows), idx] -= 1.0
        dz *= (g * w / d)[:, None]
        return (dz,)

    return record("cross_entropy_logits", (logits,), out, adjoint)


@dataclass(frozen=True)
class CustomGradSpec:
    """Elementwise op with a hand-chosen backward map.

    ``forward`` must emit exactly 0.0 or 1.0 per element; ``backward`` is
    the surrogate derivative evaluated at the pre-activation; ``smooth``
    is an antiderivative of ``backward`` substituted for the forward under
    ``surrogate_smoothing`` so finite differences see a differentiable
    function.
    """

    forward: Callable[[Array], Array]
    backward: Callable[[Array], Array]
    smooth: Callable[[Array], Array] | None = None


def custom_unary(u, spec: CustomGradSpec) -> Tensor:
    u = as_tensor(u)
    if _SMOOTH_THRESHOLDS and spec.smooth is not None:
        out = spec.smooth(u.data)
    else:
        out = spec.forward(u.data)
    ud = u.data
    bmap = spec.backward

    def adjoint(g):
        return (g * bmap(ud),)

    return record("custom_grad", (u,), out, adjoint)
