"""Reverse-mode differentiation over a closed set of array primitives.

Every primitive here accepts plain ``numpy`` arrays or :class:`Var` objects.
With plain arrays it simply evaluates; as soon as one argument is a
:class:`Var` the result is recorded on that variable's :class:`Tape` together
with a vector-Jacobian product, so ``tape.backward(loss)`` can later return
gradients for every registered leaf.  Running the same code path on plain
arrays is what the finite-difference checks in :mod:`nodeoed.nn` rely on.

Batch conventions: per-sample losses take ``(B, d)`` arrays and return ``(B,)``.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ContractError",
    "TapeError",
    "Tape",
    "Var",
    "value_of",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "affine",
    "relu",
    "sigmoid",
    "log",
    "softmax",
    "softmax_cce",
    "sq_norm",
    "max_sq",
    "mean",
    "total",
    "concat",
    "reshape",
    "broadcast_rows",
    "columns",
    "gather_linear",
    "gather_bilinear",
]


class ContractError(ValueError):
    """Raised when an operation is called outside its documented domain."""


class TapeError(RuntimeError):
    """Raised on misuse of a gradient tape (e.g. replaying a consumed tape)."""


class Var:
    """A recorded value on a :class:`Tape`."""

    __array_priority__ = 1000  # make ``ndarray + Var`` dispatch to Var

    def __init__(self, value, tape, parents=(), vjp=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.grad = None
        self.index = tape._register(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


class Tape:
    """Ordered record of primitive evaluations.

    Leaves are created with :meth:`leaf`; :meth:`backward` walks the record in
    reverse once and returns ``{leaf name: gradient}``.  A tape can only be
    consumed once.
    """

    def __init__(self):
        self._nodes = []
        self.leaves = {}
        self.consumed = False

    def _register(self, var):
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape")
        self._nodes.append(var)
        return len(self._nodes) - 1

    def leaf(self, value, name):
        if name in self.leaves:
            raise ContractError(f"duplicate leaf name {name!r}")
        var = Var(np.array(value, dtype=np.float64, copy=True), self, name=name)
        self.leaves[name] = var
        return var

    def backward(self, loss):
        """Propagate ``d loss`` back to every leaf; returns a dict of gradients."""
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if not isinstance(loss, Var) or loss.tape is not self:
            raise TapeError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        self.consumed = True

        grads = [None] * len(self._nodes)
        grads[loss.index] = np.ones_like(loss.value)
        for node in reversed(self._nodes[: loss.index + 1]):
            g = grads[node.index]
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if parent is None or pg is None:
                    continue
                if grads[parent.index] is None:
                    grads[parent.index] = np.array(pg, dtype=np.float64)
                else:
                    grads[parent.index] = grads[parent.index] + pg

        out = {}
        for name, var in self.leaves.items():
            g = grads[var.index]
            var.grad = np.zeros_like(var.value) if g is None else g.reshape(var.shape)
            out[name] = var.grad
        # drop closures and links so intermediates are freed without waiting for the cycle collector
        for node in self._nodes:
            node.parents, node.vjp = (), None
        self._nodes, self.leaves = [], {}
        return out


def value_of(x):
    """Underlying array of a Var, or the argument itself as float64."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _record(tape, value, parents, vjp):
    if tape is None:
        return value
    return Var(value, tape, tuple(p if isinstance(p, Var) else None for p in parents), vjp)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise -----------------------------------------------------------


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    return _record(
        _tape_of(a, b),
        out,
        (a, b),
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)),
    )


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    return _record(
        _tape_of(a, b),
        out,
        (a, b),
        lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)),
    )


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    return _record(
        _tape_of(a, b),
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(a, c):
    """Multiply by a Python scalar ``c``."""
    c = float(c)
    return _record(_tape_of(a), value_of(a) * c, (a,), lambda g: (g * c,))


def neg(a):
    return scale(a, -1.0)


def relu(x):
    xv = value_of(x)
    mask = xv > 0  # derivative at 0 is 0
    return _record(_tape_of(x), np.where(mask, xv, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x):
    xv = value_of(x)
    # split branches keep exp() from overflowing
    e = np.exp(-np.abs(xv))
    out = np.where(xv >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(_tape_of(x), out, (x,), lambda g: (g * out * (1.0 - out),))


def log(x):
    xv = value_of(x)
    if np.any(xv <= 0):
        raise ContractError("log of a non-positive value")
    return _record(_tape_of(x), np.log(xv), (x,), lambda g: (g / xv,))


# -- dense layer -----------------------------------------------------------


def affine(x, W, b):
    """``x @ W.T + b`` for ``x`` of shape ``(B, in)``, ``W`` of shape ``(out, in)``."""
    xv, Wv, bv = value_of(x), value_of(W), value_of(b)
    if xv.shape[-1] != Wv.shape[1]:
        raise ContractError(f"input width {xv.shape[-1]} does not match layer fan-in {Wv.shape[1]}")
    out = xv @ Wv.T + bv

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xv.reshape(-1, xv.shape[-1])
        return (g @ Wv, g2.T @ x2, g2.sum(axis=0))

    return _record(_tape_of(x, W, b), out, (x, W, b), vjp)


# -- softmax / losses ------------------------------------------------------


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits):
    """Row-wise softmax (forward only; training uses :func:`softmax_cce`)."""
    return _softmax(value_of(logits))


def softmax_cce(logits, onehot):
    """Per-row categorical cross-entropy of ``softmax(logits)``.

    Fused so the backward pass is ``p - onehot`` rather than a division by
    small probabilities.  ``onehot`` is treated as a constant.
    """
    zv = value_of(logits)
    t = value_of(onehot)
    z = zv - zv.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    out = -(t * logp).sum(axis=-1)
    p = np.exp(logp)
    return _record(
        _tape_of(logits), out, (logits,), lambda g: (g[..., None] * (p * t.sum(-1, keepdims=True) - t),)
    )


def sq_norm(x):
    """Per-row squared Euclidean norm."""
    xv = value_of(x)
    return _record(_tape_of(x), (xv * xv).sum(axis=-1), (x,), lambda g: (2.0 * g[..., None] * xv,))


def max_sq(x):
    """Per-row ``max_i x_i**2``; the subgradient goes to the lowest maximizing index."""
    xv = value_of(x)
    if xv.shape[-1] == 0:
        raise ContractError("max of an empty vector")
    sq = xv * xv
    idx = np.argmax(sq, axis=-1)  # argmax returns the first maximizer
    out = np.take_along_axis(sq, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        grad = np.zeros_like(xv)
        sel = np.take_along_axis(xv, idx[..., None], axis=-1)
        np.put_along_axis(grad, idx[..., None], 2.0 * g[..., None] * sel, axis=-1)
        return (grad,)

    return _record(_tape_of(x), out, (x,), vjp)


def mean(x):
    xv = value_of(x)
    n = xv.size
    return _record(_tape_of(x), np.asarray(xv.mean()), (x,), lambda g: (np.full(xv.shape, g / n),))


def total(x):
    xv = value_of(x)
    return _record(_tape_of(x), np.asarray(xv.sum()), (x,), lambda g: (np.full(xv.shape, g),))


# -- shape ops -------------------------------------------------------------


def concat(parts, axis=-1):
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(_tape_of(*parts), out, tuple(parts), vjp)


def reshape(x, shape):
    xv = value_of(x)
    return _record(_tape_of(x), xv.reshape(shape), (x,), lambda g: (g.reshape(xv.shape),))


def broadcast_rows(x, rows):
    """Stack ``rows`` copies of ``x`` along a new leading axis."""
    xv = value_of(x)
    out = np.broadcast_to(xv, (rows,) + xv.shape).copy()
    return _record(_tape_of(x), out, (x,), lambda g: (g.sum(axis=0),))


def columns(x, idx):
    """Select columns ``idx`` along the last axis."""
    xv = value_of(x)
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, (Ellipsis, idx), g)
        return (gx,)

    return _record(_tape_of(x), xv[..., idx], (x,), vjp)


# -- interpolation gathers ---------------------------------------------------


def _cell(q, n_nodes):
    """Left node index and fraction; right-sided except at the last node."""
    i0 = np.clip(np.floor(q).astype(np.int64), 0, n_nodes - 2)
    return i0, q - i0


def gather_linear(field, query):
    """Linearly interpolate rows of ``field`` (B, N) at index positions ``query`` (M,).

    Node ``i`` sits at position ``i``.  Gradients flow to ``field`` and ``query``.
    """
    F = value_of(field)
    q = value_of(query)
    n = F.shape[-1]
    if np.any(q < 0) or np.any(q > n - 1):
        raise ContractError("query outside the node span")
    i0, fr = _cell(q, n)
    left, right = F[..., i0], F[..., i0 + 1]
    out = left + (right - left) * fr

    def vjp(g):
        gF = np.zeros_like(F)
        np.add.at(gF, (Ellipsis, i0), g * (1.0 - fr))
        np.add.at(gF, (Ellipsis, i0 + 1), g * fr)
        gq = (g * (right - left)).reshape(-1, q.size).sum(axis=0)
        return (gF, gq)

    return _record(_tape_of(field, query), out, (field, query), vjp)


def gather_bilinear(images, coords):
    """Bilinear samples of ``images`` (B, H, W) at ``coords`` (M, 2) of (row, col).

    Returns ``(B, M)``.  Gradient flows to ``coords`` (summed over the batch)
    and to ``images``.
    """
    X = value_of(images)
    c = value_of(coords)
    H, W = X.shape[-2:]
    r, k = c[:, 0], c[:, 1]
    if np.any(r < 0) or np.any(r > H - 1) or np.any(k < 0) or np.any(k > W - 1):
        raise ContractError("bilinear query outside the image")
    r0, fr = _cell(r, H)
    k0, fk = _cell(k, W)
    v00 = X[..., r0, k0]
    v01 = X[..., r0, k0 + 1]
    v10 = X[..., r0 + 1, k0]
    v11 = X[..., r0 + 1, k0 + 1]
    out = (1 - fr) * ((1 - fk) * v00 + fk * v01) + fr * ((1 - fk) * v10 + fk * v11)

    def vjp(g):
        d_r = (1 - fk) * (v10 - v00) + fk * (v11 - v01)
        d_k = (1 - fr) * (v01 - v00) + fr * (v11 - v10)
        gc = np.stack(
            [(g * d_r).reshape(-1, c.shape[0]).sum(0), (g * d_k).reshape(-1, c.shape[0]).sum(0)],
            axis=1,
        )
        gX = np.zeros_like(X)
        for rr, kk, w in (
            (r0, k0, (1 - fr) * (1 - fk)),
            (r0, k0 + 1, (1 - fr) * fk),
            (r0 + 1, k0, fr * (1 - fk)),
            (r0 + 1, k0 + 1, fr * fk),
        ):
            np.add.at(gX, (Ellipsis, rr, kk), g * w)
        return (gX, gc)

    return _record(_tape_of(images, coords), out, (images, coords), vjp)
