"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation whose inputs are tracked records a backward closure on the
output tensor; ``backward`` on a scalar result replays the closures of all
reachable nodes in exact reverse creation order. Graphs are rebuilt on every
forward pass and are consumed by a single backward pass; a second backward
over the same nodes raises ``GraphStateError``.

All arithmetic is 64-bit: the gradient checks this package ships with would
drown in float32 noise.
"""

from __future__ import annotations

import itertools

import numpy as np

NORM_EPS = 1e-12

__all__ = [
    "NORM_EPS",
    "ShapeError",
    "MaskError",
    "GraphStateError",
    "Tensor",
    "no_grad",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "linear",
    "relu",
    "tanh",
    "softmax",
    "cosine_similarity",
    "cosine_rows",
    "concat",
    "broadcast_row",
    "vector_item",
    "matrix_row",
    "embedding_lookup",
]


class ShapeError(ValueError):
    """Operand shapes do not fit the requested operation."""


class MaskError(ValueError):
    """A masked reduction was invoked with every position masked."""


class GraphStateError(RuntimeError):
    """A differentiation tape was reused after backward consumed it."""


_creation_counter = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager that suspends tape recording (values only, no graph)."""

    __slots__ = ("_saved",)

    def __enter__(self) -> "no_grad":
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc) -> None:
        global _grad_enabled
        _grad_enabled = self._saved


class Tensor:
    """N-dimensional float64 array, optionally tracked for differentiation.

    ``grad`` is allocated lazily for interior nodes and eagerly (all-zero)
    for tensors created with ``requires_grad=True``, so an untouched leaf
    reports a zero gradient after any backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn",
                 "_order", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        if type(data) is np.ndarray and data.dtype == np.float64:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents = ()
        self._backward_fn = None
        self._order = next(_creation_counter)
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def sum(self, axis: int | None = None) -> Tensor:
        data = self.data.sum(axis=axis)
        shape = self.data.shape

        def bwd(g):
            if axis is None:
                _add_grad(self, np.full(shape, g))
            else:
                _add_grad(self, np.broadcast_to(np.expand_dims(g, axis), shape))

        return _result(data, (self,), bwd)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        data = self.data.reshape(shape)

        def bwd(g):
            _add_grad(self, g.reshape(old))

        return _result(data, (self,), bwd)

    # arithmetic sugar; python scalars are wrapped as constants
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _add_grad(t: Tensor, g) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Populate gradients of every tracked tensor reachable from ``loss``.

    Replays backward closures in exact reverse creation order, which is a
    topological order for any tape built by normal forward execution.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if loss._consumed:
        raise GraphStateError("backward already ran on this graph; rebuild the forward pass")

    tape = []
    visited = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in visited:
            continue
        visited.add(id(node))
        if node._consumed:
            raise GraphStateError("graph shares nodes with an already back-propagated pass")
        if node._backward_fn is not None:
            tape.append(node)
            stack.extend(node._parents)
    tape.sort(key=lambda t: t._order, reverse=True)

    if loss.grad is None:
        loss.grad = np.zeros((), dtype=np.float64)
    loss.grad = loss.grad + 1.0
    loss._consumed = True
    for node in tape:
        node._consumed = True
        # a node whose consumers all propagate nothing (e.g. through a
        # zero-norm cosine) still runs with a zero incoming gradient
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
        node._backward_fn(node.grad)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _add_grad(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _add_grad(b, _unbroadcast(g, b.data.shape))

    return _result(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _add_grad(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _add_grad(b, _unbroadcast(-g, b.data.shape))

    return _result(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.data, b.data
    data = ad * bd

    def bwd(g):
        if a.requires_grad:
            _add_grad(a, _unbroadcast(g * bd, ad.shape))
        if b.requires_grad:
            _add_grad(b, _unbroadcast(g * ad, bd.shape))

    return _result(data, (a, b), bwd)


def neg(a) -> Tensor:
    a = _coerce(a)

    def bwd(g):
        if a.requires_grad:
            _add_grad(a, -g)

    return _result(-a.data, (a,), bwd)


def matmul(a, b) -> Tensor:
    """Matrix product over 1-D/2-D operands with numpy's contraction rules."""
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise ShapeError(f"matmul expects 1-D or 2-D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {ad.shape} vs {bd.shape}")
    data = ad @ bd

    def bwd(g):
        if a.requires_grad:
            if ad.ndim == 1 and bd.ndim == 1:
                ga = g * bd
            elif ad.ndim == 1:
                ga = bd @ g
            elif bd.ndim == 1:
                ga = np.outer(g, bd)
            else:
                ga = g @ bd.T
            _add_grad(a, ga)
        if b.requires_grad:
            if ad.ndim == 1 and bd.ndim == 1:
                gb = g * ad
            elif ad.ndim == 1:
                gb = np.outer(ad, g)
            else:
                gb = ad.T @ g
            _add_grad(b, gb)

    return _result(data, (a, b), bwd)


def linear(x, w, b=None) -> Tensor:
    """Affine map ``x @ w + b`` fused into one node (hot path helper)."""
    x, w = _coerce(x), _coerce(w)
    xd, wd = x.data, w.data
    if xd.ndim not in (1, 2) or wd.ndim != 2:
        raise ShapeError(f"linear expects 1-D/2-D input and 2-D weight, got {xd.shape} and {wd.shape}")
    if xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"linear inner dimensions differ: {xd.shape} vs {wd.shape}")
    data = xd @ wd
    if b is None:
        parents = (x, w)
        bt = None
    else:
        bt = _coerce(b)
        data = data + bt.data
        parents = (x, w, bt)

    def bwd(g):
        if x.requires_grad:
            _add_grad(x, g @ wd.T if xd.ndim == 2 else wd @ g)
        if w.requires_grad:
            _add_grad(w, xd.T @ g if xd.ndim == 2 else np.outer(xd, g))
        if bt is not None and bt.requires_grad:
            _add_grad(bt, g.sum(axis=0) if xd.ndim == 2 else g)

    return _result(data, parents, bwd)


def relu(x) -> Tensor:
    x = _coerce(x)
    data = np.maximum(x.data, 0.0)

    def bwd(g):
        if x.requires_grad:
            _add_grad(x, g * (data > 0.0))

    return _result(data, (x,), bwd)


def tanh(x) -> Tensor:
    x = _coerce(x)
    data = np.tanh(x.data)

    def bwd(g):
        if x.requires_grad:
            _add_grad(x, g * (1.0 - data * data))

    return _result(data, (x,), bwd)


def softmax(x, mask=None) -> Tensor:
    """Numerically stable softmax over a vector; masked positions are exactly 0.

    The normalization runs over unmasked positions only. Raises ``MaskError``
    when every position is masked.
    """
    x = _coerce(x)
    xd = x.data
    if xd.ndim != 1 or xd.size < 1:
        raise ShapeError(f"softmax expects a nonempty vector, got shape {xd.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != xd.shape:
            raise ShapeError(f"softmax mask shape {mask.shape} does not match input {xd.shape}")
        if not mask.any():
            raise MaskError("softmax: every position is masked")
        e = np.zeros_like(xd)
        live = xd[mask]
        e[mask] = np.exp(live - live.max())
    else:
        e = np.exp(xd - xd.max())
    data = e / e.sum()

    def bwd(g):
        if x.requires_grad:
            _add_grad(x, data * (g - float(g @ data)))

    return _result(data, (x,), bwd)


def cosine_similarity(a, b) -> Tensor:
    """Cosine of the angle between two vectors, in [-1, 1].

    Either vector with norm below ``NORM_EPS`` yields 0 with zero gradient,
    so zero-padded slots never produce NaNs.
    """
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.data, b.data
    if ad.ndim != 1 or bd.ndim != 1 or ad.shape != bd.shape:
        raise ShapeError(f"cosine_similarity expects equal-length vectors, got {ad.shape} and {bd.shape}")
    na = float(np.linalg.norm(ad))
    nb = float(np.linalg.norm(bd))
    if na < NORM_EPS or nb < NORM_EPS:
        def dead(g):
            pass

        return _result(np.float64(0.0), (a, b), dead)
    c = float(ad @ bd) / (na * nb)

    def bwd(g):
        gf = float(g)
        if a.requires_grad:
            _add_grad(a, gf * (bd / (na * nb) - (c / (na * na)) * ad))
        if b.requires_grad:
            _add_grad(b, gf * (ad / (na * nb) - (c / (nb * nb)) * bd))

    return _result(np.float64(c), (a, b), bwd)


def cosine_rows(v, rows) -> Tensor:
    """Cosine between one vector and every row of a matrix, as a vector.

    Rows (or ``v``) with norm below ``NORM_EPS`` contribute 0 with zero
    gradient, matching ``cosine_similarity``.
    """
    v, rows = _coerce(v), _coerce(rows)
    vd, rd = v.data, rows.data
    if vd.ndim != 1 or rd.ndim != 2 or rd.shape[1] != vd.shape[0]:
        raise ShapeError(f"cosine_rows expects (d,) and (n, d), got {vd.shape} and {rd.shape}")
    nv = float(np.linalg.norm(vd))
    if nv < NORM_EPS:
        def dead(g):
            pass

        return _result(np.zeros(rd.shape[0]), (v, rows), dead)
    nr = np.linalg.norm(rd, axis=1)
    live = nr >= NORM_EPS
    nr_safe = np.where(live, nr, 1.0)
    data = np.where(live, (rd @ vd) / (nv * nr_safe), 0.0)

    def bwd(g):
        gl = np.where(live, g, 0.0)
        if v.requires_grad:
            gv = (rd.T @ (gl / nr_safe)) / nv - (float(gl @ data) / (nv * nv)) * vd
            _add_grad(v, gv)
        if rows.requires_grad:
            gr = np.outer(gl / nr_safe, vd) / nv - ((gl * data / (nr_safe * nr_safe))[:, None]) * rd
            _add_grad(rows, gr)

    return _result(data, (v, rows), bwd)


def concat(parts, axis: int = 0) -> Tensor:
    parts = tuple(_coerce(p) for p in parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(g):
        offset = 0
        index = [slice(None)] * g.ndim
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                index[axis] = slice(offset, offset + n)
                _add_grad(p, g[tuple(index)])
            offset += n

    return _result(data, parts, bwd)


def broadcast_row(x, n: int) -> Tensor:
    """Repeat a vector as ``n`` identical rows; gradient sums back over rows."""
    x = _coerce(x)
    if x.data.ndim != 1:
        raise ShapeError(f"broadcast_row expects a vector, got shape {x.data.shape}")
    data = np.broadcast_to(x.data, (n, x.data.shape[0]))

    def bwd(g):
        if x.requires_grad:
            _add_grad(x, g.sum(axis=0))

    return _result(data, (x,), bwd)


def vector_item(x, i: int) -> Tensor:
    x = _coerce(x)
    if x.data.ndim != 1:
        raise ShapeError(f"vector_item expects a vector, got shape {x.data.shape}")

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[i] = g
            _add_grad(x, gx)

    return _result(np.float64(x.data[i]), (x,), bwd)


def matrix_row(x, i: int) -> Tensor:
    x = _coerce(x)
    if x.data.ndim != 2:
        raise ShapeError(f"matrix_row expects a matrix, got shape {x.data.shape}")

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[i] = g
            _add_grad(x, gx)

    return _result(x.data[i], (x,), bwd)


def embedding_lookup(table, ids, padding_id: int = 0) -> Tensor:
    """Gather rows of an embedding table by id.

    Rows for ``padding_id`` come out all-zero and receive no gradient; all
    other gradients flow only to the rows that were looked up.
    """
    table = _coerce(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup expects a 2-D table, got shape {table.data.shape}")
    if ids.ndim != 1:
        raise ShapeError(f"embedding_lookup expects a 1-D id list, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(f"token id out of range for table with {table.data.shape[0]} rows: {ids}")
    data = table.data[ids].copy()
    live = ids != padding_id
    data[~live] = 0.0

    def bwd(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids[live], g[live])

    return _result(data, (table,), bwd)
