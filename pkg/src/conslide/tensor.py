"""Dense float64 tensors with reverse-mode automatic differentiation.

A small define-by-run engine: every operation returns a fresh tensor that
remembers its parent tensors and a closure that pushes gradients back to
them.  ``backward`` collects the operation records reachable from a scalar
loss into a :class:`ComputationTape` (creation order is already topological
order) and replays them exactly once in reverse.

Deliberate restrictions, sized for feature-bag models on a desk:

* float64 only; values are checked finite where they enter the graph.
* no implicit broadcasting -- shapes must match elementwise, and any
  expansion goes through the explicit ``broadcast_to``.
* matmul batch dimensions must be equal (or one operand is a plain matrix).
* single-threaded per tape; separate graphs share nothing but leaf tensors.
"""

from __future__ import annotations

import itertools
import math
import threading
from dataclasses import dataclass

import numpy as np

_ids = itertools.count()

_state = threading.local()


def _tracking() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording (pure forward math)."""

    def __enter__(self):
        self._prev = _tracking()
        _state.grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.grad_enabled = self._prev
        return False


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigurationError(ValueError):
    """A structural parameter (head count, kernel size, ...) is invalid."""


class Tensor:
    """A dense float64 array plus the bookkeeping needed for backward."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_tid")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite (got NaN or Inf)")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._tid = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def detach(self) -> "Tensor":
        return detach(self)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, op={self._op!r}, requires_grad={self.requires_grad})"

    # Arithmetic sugar. Scalar operands mean scale/shift, never broadcasting.
    def __add__(self, other):
        return add_scalar(self, other) if isinstance(other, (int, float)) else add(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return add_scalar(self, -other) if isinstance(other, (int, float)) else sub(self, other)

    def __mul__(self, other):
        return scale(self, other) if isinstance(other, (int, float)) else mul(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _plain(data, op: str) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = False
    t._parents = ()
    t._backward = None
    t._op = op
    t._tid = next(_ids)
    return t


def _node(data, parents, op: str, backward_fn) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = True
    t._parents = parents
    t._backward = backward_fn
    t._op = op
    t._tid = next(_ids)
    return t


def _track(*tensors) -> bool:
    return _tracking() and any(t.requires_grad for t in tensors)


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes differ: {a.data.shape} vs {b.data.shape}")


@dataclass
class TapeRecord:
    """One recorded operation: ids in, id out, plus the saved closure."""

    op: str
    input_ids: tuple
    output_id: int
    output: Tensor


class ComputationTape:
    """The operations reachable from one output, in creation order.

    Creation order is topological order for a define-by-run graph, so a
    single reverse sweep visits every record exactly once.
    """

    def __init__(self, records):
        self.records = records

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputationTape":
        seen = set()
        nodes = []
        stack = [out]
        while stack:
            t = stack.pop()
            if t._backward is None or id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._tid)
        records = [
            TapeRecord(t._op, tuple(p._tid for p in t._parents), t._tid, t) for t in nodes
        ]
        return cls(records)

    def run(self, seed: np.ndarray):
        """Reverse sweep: accumulate into leaf ``grad`` fields.

        Interior gradients live in a scratch dict so repeated backward
        passes over a shared forward graph cannot contaminate each other.
        """
        if not self.records:
            return
        grads = {self.records[-1].output_id: seed}
        for rec in reversed(self.records):
            g = grads.pop(rec.output_id, None)
            if g is None:
                continue
            t = rec.output
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.data)
                    parent.grad += pg
                else:
                    acc = grads.get(parent._tid)
                    grads[parent._tid] = pg if acc is None else acc + pg


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = ComputationTape.from_output(loss)
    tape.run(np.ones_like(loss.data))


def zero_grads(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise and scalar ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    data = a.data + b.data
    if not _track(a, b):
        return _plain(data, "add")
    return _node(data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    data = a.data - b.data
    if not _track(a, b):
        return _plain(data, "sub")
    return _node(data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    data = a.data * b.data
    if not _track(a, b):
        return _plain(data, "mul")
    return _node(data, (a, b), "mul", lambda g: (g * b.data, g * a.data))


def neg(a: Tensor) -> Tensor:
    if not _track(a):
        return _plain(-a.data, "neg")
    return _node(-a.data, (a,), "neg", lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    data = a.data * s
    if not _track(a):
        return _plain(data, "scale")
    return _node(data, (a,), "scale", lambda g: (g * s,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    data = a.data + s
    if not _track(a):
        return _plain(data, "add_scalar")
    return _node(data, (a,), "add_scalar", lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)
    if not _track(a):
        return _plain(data, "relu")
    mask = a.data > 0.0
    return _node(data, (a,), "relu", lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    if not _track(a):
        return _plain(data, "exp")
    return _node(data, (a,), "exp", lambda g: (g * data,))


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)
    if not _track(a):
        return _plain(data, "log")
    return _node(data, (a,), "log", lambda g: (g / a.data,))


def pow_scalar(a: Tensor, p: float) -> Tensor:
    p = float(p)
    data = a.data ** p
    if not _track(a):
        return _plain(data, "pow")
    return _node(data, (a,), "pow", lambda g: (g * p * a.data ** (p - 1.0),))


def detach(a: Tensor) -> Tensor:
    """Same values, cut from the graph (no gradient flows past here)."""
    return _plain(a.data, "detach")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    data = a.data.reshape(shape)
    if not _track(a):
        return _plain(data, "reshape")
    src = a.data.shape
    return _node(data, (a,), "reshape", lambda g: (g.reshape(src),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    data = np.ascontiguousarray(a.data.transpose(axes))
    if not _track(a):
        return _plain(data, "permute")
    inv = tuple(np.argsort(axes))
    return _node(data, (a,), "permute", lambda g: (g.transpose(inv),))


def transpose_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"transpose_last2 needs ndim >= 2, got shape {a.shape}")
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return permute(a, axes)


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast (right-aligned, numpy rules); backward sums."""
    shape = tuple(int(s) for s in shape)
    try:
        data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    except ValueError as e:
        raise ShapeError(f"broadcast_to: cannot expand {a.data.shape} to {shape}") from e
    if not _track(a):
        return _plain(data, "broadcast")
    src = a.data.shape
    extra = len(shape) - len(src)

    def bw(g):
        axes = tuple(range(extra)) + tuple(
            extra + i for i, d in enumerate(src) if d == 1 and shape[extra + i] != 1
        )
        r = g.sum(axis=axes) if axes else g
        return (r.reshape(src),)

    return _node(data, (a,), "broadcast", bw)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along axis 0; trailing dims must agree."""
    if a.data.shape[1:] != b.data.shape[1:]:
        raise ShapeError(f"concat_rows: trailing dims differ: {a.shape} vs {b.shape}")
    data = np.concatenate([a.data, b.data], axis=0)
    if not _track(a, b):
        return _plain(data, "concat")
    n = a.data.shape[0]
    return _node(data, (a, b), "concat", lambda g: (g[:n], g[n:]))


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    data = np.ascontiguousarray(a.data[start:stop])
    if not _track(a):
        return _plain(data, "slice")

    def bw(g):
        z = np.zeros_like(a.data)
        z[start:stop] = g
        return (z,)

    return _node(data, (a,), "slice", bw)


def take_scalar(a: Tensor, index: int) -> Tensor:
    """Pick one entry of a 1-D tensor as a scalar."""
    if a.ndim != 1:
        raise ShapeError(f"take_scalar needs a 1-D tensor, got shape {a.shape}")
    index = int(index)
    data = np.asarray(a.data[index])
    if not _track(a):
        return _plain(data, "take")

    def bw(g):
        z = np.zeros_like(a.data)
        z[index] = g
        return (z,)

    return _node(data, (a,), "take", bw)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum())
    if not _track(a):
        return _plain(data, "sum")
    shp = a.data.shape
    return _node(data, (a,), "sum", lambda g: (np.full(shp, float(g)),))


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    axis = int(axis)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if not _track(a):
        return _plain(data, "sum_axis")
    shp = a.data.shape

    def bw(g):
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, shp).copy(),)

    return _node(data, (a,), "sum_axis", bw)


def mean_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    axis = int(axis)
    n = a.data.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)
    if not _track(a):
        return _plain(data, "mean_axis")
    shp = a.data.shape

    def bw(g):
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge / n, shp).copy(),)

    return _node(data, (a,), "mean_axis", bw)


def max_axis(a: Tensor, axis: int) -> Tensor:
    """Max over one axis; gradient routes to the first argmax per slice."""
    axis = int(axis)
    data = a.data.max(axis=axis)
    if not _track(a):
        return _plain(data, "max_axis")
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    shp = a.data.shape

    def bw(g):
        z = np.zeros(shp)
        np.put_along_axis(z, idx, np.expand_dims(g, axis), axis)
        return (z,)

    return _node(data, (a,), "max_axis", bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading (batch) dimensions must be identical, except that either
    operand may be a plain matrix shared across the other's batch.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} vs {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ: {a.shape} vs {b.shape}")
    data = a.data @ b.data
    if not _track(a, b):
        return _plain(data, "matmul")
    a_ndim, b_ndim = a.ndim, b.ndim

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if ga.ndim > a_ndim:
            ga = ga.sum(axis=tuple(range(ga.ndim - a_ndim)))
        if gb.ndim > b_ndim:
            gb = gb.sum(axis=tuple(range(gb.ndim - b_ndim)))
        return (ga, gb)

    return _node(data, (a, b), "matmul", bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with the bias explicitly broadcast over the rows."""
    y = matmul(x, w)
    return add(y, broadcast_to(b, y.shape))


# ---------------------------------------------------------------------------
# normalization and attention


def softmax_rows(x: Tensor) -> Tensor:
    """Stabilized softmax over the last axis; rows sum to 1."""
    if x.data.shape[-1] < 1:
        raise ShapeError("softmax_rows needs a non-empty last axis")
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax_rows: non-finite input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)
    if not _track(x):
        return _plain(data, "softmax")

    def bw(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - dot),)

    return _node(data, (x,), "softmax", bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise ValueError("log_softmax_rows: non-finite input")
    m = x.data.max(axis=-1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse
    if not _track(x):
        return _plain(data, "log_softmax")
    soft = np.exp(data)

    def bw(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _node(data, (x,), "log_softmax", bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Zero-mean unit-variance over the last axis, then affine."""
    if eps <= 0:
        raise ConfigurationError(f"layer_norm eps must be > 0, got {eps}")
    c = x.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"layer_norm: gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data
    if not _track(x, gamma, beta):
        return _plain(data, "layer_norm")
    reduce_axes = tuple(range(x.data.ndim - 1))

    def bw(g):
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        dxhat = g * gamma.data
        dx = (inv / c) * (
            c * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return (dx, dgamma, dbeta)

    return _node(data, (x, gamma, beta), "layer_norm", bw)


def conv1d_same(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """1-D convolution along the middle axis with zero "same" padding.

    x: [batch, length, c_in], w: [kernel, c_in, c_out] (kernel odd), b: [c_out].
    """
    k, c_in, c_out = w.data.shape
    if k % 2 == 0:
        raise ConfigurationError(f"conv1d_same kernel must be odd, got {k}")
    if x.ndim != 3 or x.data.shape[-1] != c_in:
        raise ShapeError(f"conv1d_same: input {x.shape} does not match weight {w.data.shape}")
    if b.data.shape != (c_out,):
        raise ShapeError(f"conv1d_same: bias must have shape ({c_out},), got {b.shape}")
    n = x.data.shape[1]
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0))) if pad else x.data
    data = np.zeros((x.data.shape[0], n, c_out))
    for t in range(k):
        data += xp[:, t : t + n, :] @ w.data[t]
    data += b.data
    if not _track(x, w, b):
        return _plain(data, "conv1d")

    def bw(g):
        db = g.sum(axis=(0, 1))
        dw = np.empty_like(w.data)
        dxp = np.zeros_like(xp)
        for t in range(k):
            win = xp[:, t : t + n, :]
            dw[t] = np.einsum("bnc,bnd->cd", win, g)
            dxp[:, t : t + n, :] += g @ w.data[t].T
        dx = dxp[:, pad : pad + n, :] if pad else dxp
        return (dx, dw, db)

    return _node(data, (x, w, b), "conv1d", bw)


@dataclass
class AttentionParams:
    """Projection weights for one multi-head self-attention operator."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


def msa(x: Tensor, params: AttentionParams, heads: int, return_weights: bool = False):
    """Scaled dot-product multi-head self-attention over the last two axes.

    Accepts [..., S, C]; no positional information anywhere, so outputs are
    equivariant under permutation of the S tokens. With return_weights, also
    returns the (detached) attention array shaped [..., heads, S, S].
    """
    if x.ndim < 2:
        raise ShapeError(f"msa needs [..., S, C] input, got shape {x.shape}")
    *lead, s, c = x.data.shape
    if c % heads != 0:
        raise ConfigurationError(f"channels {c} not divisible by heads {heads}")
    if s < 1:
        raise ShapeError("msa needs at least one token")
    d = c // heads
    xb = reshape(x, (-1, s, c))
    batch = xb.data.shape[0]

    def split_heads(t):
        return permute(reshape(t, (batch, s, heads, d)), (0, 2, 1, 3))

    q = split_heads(linear(xb, params.wq, params.bq))
    k = split_heads(linear(xb, params.wk, params.bk))
    v = split_heads(linear(xb, params.wv, params.bv))
    scores = scale(matmul(q, transpose_last2(k)), 1.0 / math.sqrt(d))
    attn = softmax_rows(scores)
    ctx = matmul(attn, v)
    merged = reshape(permute(ctx, (0, 2, 1, 3)), (batch, s, c))
    out = reshape(linear(merged, params.wo, params.bo), tuple(lead) + (s, c))
    if return_weights:
        weights = attn.data.reshape(tuple(lead) + (heads, s, s)).copy()
        return out, weights
    return out


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Negative log-likelihood of ``label`` under softmax of 1-D logits."""
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy needs 1-D logits, got shape {logits.shape}")
    label = int(label)
    if not 0 <= label < logits.data.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.data.shape[0]} classes")
    return neg(take_scalar(log_softmax_rows(logits), label))
