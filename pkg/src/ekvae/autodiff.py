"""Reverse-mode automatic differentiation on dense float64 numpy arrays.

A dynamic tape records primitive operations while a ``Tape`` context is
active; ``Tape.backward`` replays it in reverse. Outside a tape context all
operations evaluate eagerly without recording, so inference code pays no
bookkeeping cost.

All data is float64 and row-major. Primitives support leading batch
dimensions with numpy broadcasting; matrix primitives (matmul, inv,
cholesky, ...) operate on the last two axes.
"""

from __future__ import annotations

import numpy as np

_ACTIVE_TAPE = None


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """A float64 array plus (optionally) a record of how it was computed."""

    __slots__ = ("data", "_parents", "_vjp", "_op")

    def __init__(self, data, _parents=(), _vjp=None, _op="leaf"):
        self.data = _as_array(data)
        self._parents = _parents
        self._vjp = _vjp
        self._op = _op

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operator sugar ------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def mT(self):
        return transpose_last(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Records primitives in execution order (a valid topological order)."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, root: Tensor, wrt: list[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``root`` w.r.t. each tensor in ``wrt``.

        Tensors that do not influence ``root`` get zero gradients. The
        reduction order is fixed by the tape, so results are deterministic.
        """
        if root.data.size != 1:
            raise ValueError(
                f"backward root must be scalar, got shape {root.data.shape}"
            )
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None or node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                acc = grads.get(id(parent))
                if acc is None:
                    grads[id(parent)] = pg
                else:
                    grads[id(parent)] = acc + pg
        return [grads.get(id(w), np.zeros_like(w.data)) for w in wrt]


def _record(data, parents, vjp, op) -> Tensor:
    if _ACTIVE_TAPE is None:
        return Tensor(data)
    out = Tensor(data, _parents=parents, _vjp=vjp, _op=op)
    _ACTIVE_TAPE.nodes.append(out)
    return out


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum-reduce ``grad`` back to ``shape`` (inverse of broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcastable"
        ) from None


# -- elementwise primitives ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("add", a.data, b.data)
    out = a.data + b.data

    def vjp(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("sub", a.data, b.data)
    out = a.data - b.data

    def vjp(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("mul", a.data, b.data)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))

    return _record(out, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("div", a.data, b.data)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        )

    return _record(out, (a, b), vjp, "div")


def power(a, p: float) -> Tensor:
    a = _lift(a)
    p = float(p)
    out = a.data ** p
    ad = a.data

    def vjp(g):
        return (g * p * ad ** (p - 1.0),)

    return _record(out, (a,), vjp, "power")


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _record(out, (a,), vjp, "exp")


def log(a) -> Tensor:
    a = _lift(a)
    out = np.log(a.data)
    ad = a.data

    def vjp(g):
        return (g / ad,)

    return _record(out, (a,), vjp, "log")


def sqrt(a) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / out,)

    return _record(out, (a,), vjp, "sqrt")


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _record(out, (a,), vjp, "tanh")


def relu(a) -> Tensor:
    a = _lift(a)
    out = np.maximum(a.data, 0.0)
    mask = (a.data > 0.0).astype(np.float64)

    def vjp(g):
        return (g * mask,)

    return _record(out, (a,), vjp, "relu")


# -- reductions / shape ops ---------------------------------------------------

def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.data.shape

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(ax % len(in_shape) for ax in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _record(out, (a,), vjp, "sum")


def mean_(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax % a.data.ndim] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    out = a.data.reshape(shape)
    in_shape = a.data.shape

    def vjp(g):
        return (g.reshape(in_shape),)

    return _record(out, (a,), vjp, "reshape")


def getitem(a, idx) -> Tensor:
    a = _lift(a)
    out = a.data[idx]
    in_shape = a.data.shape

    def vjp(g):
        full = np.zeros(in_shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (a,), vjp, "getitem")


def concat(tensors, axis=0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), vjp, "concat")


def stack(tensors, axis=0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in parts)

    return _record(out, tuple(tensors), vjp, "stack")


def transpose_last(a) -> Tensor:
    a = _lift(a)
    out = np.swapaxes(a.data, -1, -2)

    def vjp(g):
        return (np.swapaxes(g, -1, -2),)

    return _record(out, (a,), vjp, "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    out = np.broadcast_to(a.data, shape).copy()
    in_shape = a.data.shape

    def vjp(g):
        return (_unbroadcast(g, in_shape),)

    return _record(out, (a,), vjp, "broadcast_to")


# -- matrix primitives --------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(
            f"matmul requires matrices, got shapes {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul: inner dimensions differ, {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return _record(out, (a, b), vjp, "matmul")


def matvec(a, v) -> Tensor:
    """(..., m, n) @ (..., n) -> (..., m), built from matmul."""
    v = _lift(v)
    col = reshape(v, v.shape + (1,))
    out = matmul(a, col)
    return reshape(out, out.shape[:-1])


def diagonal_last(a) -> Tensor:
    """Diagonal of the last two axes: (..., n, n) -> (..., n)."""
    a = _lift(a)
    out = np.diagonal(a.data, axis1=-2, axis2=-1).copy()
    n = a.data.shape[-1]
    in_shape = a.data.shape

    def vjp(g):
        full = np.zeros(in_shape)
        idx = np.arange(n)
        full[..., idx, idx] = g
        return (full,)

    return _record(out, (a,), vjp, "diagonal")


def inv(a) -> Tensor:
    """Batched matrix inverse of the last two axes."""
    a = _lift(a)
    out = np.linalg.inv(a.data)

    def vjp(g):
        outT = np.swapaxes(out, -1, -2)
        return (-outT @ g @ outT,)

    return _record(out, (a,), vjp, "inv")


def cholesky(a) -> Tensor:
    """Batched lower Cholesky factor. Raises LinAlgError on non-PD input."""
    a = _lift(a)
    L = np.linalg.cholesky(a.data)

    def vjp(g):
        # Murray (2016): abar = L^-T Phi(L^T Lbar) L^-1, symmetrised,
        # where Phi takes the lower triangle with the diagonal halved.
        Lt = np.swapaxes(L, -1, -2)
        P = np.tril(Lt @ g)
        n = L.shape[-1]
        idx = np.arange(n)
        P[..., idx, idx] *= 0.5
        Linv = np.linalg.inv(L)
        LinvT = np.swapaxes(Linv, -1, -2)
        abar = LinvT @ P @ Linv
        sym = (abar + np.swapaxes(abar, -1, -2)) * 0.5
        # np.linalg.cholesky only reads the lower triangle, so route the
        # full sensitivity there (matches elementwise finite differences)
        out = np.tril(2.0 * sym)
        out[..., idx, idx] -= sym[..., idx, idx]
        return (out,)

    return _record(L, (a,), vjp, "cholesky")


# -- composed helpers ---------------------------------------------------------

def softmax(a) -> Tensor:
    """Softmax over the last axis (shift by the detached max, so exact)."""
    a = _lift(a)
    shift = np.max(a.data, axis=-1, keepdims=True)
    e = exp(sub(a, shift))
    return div(e, sum_(e, axis=-1, keepdims=True))


def logsumexp(a) -> Tensor:
    a = _lift(a)
    shift = np.max(a.data, axis=-1, keepdims=True)
    s = sum_(exp(sub(a, shift)), axis=-1)
    return add(log(s), np.squeeze(shift, axis=-1))
