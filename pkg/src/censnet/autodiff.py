"""Reverse-mode automatic differentiation on an explicit tape.

Operations are recorded onto the innermost active :class:`Tape` (a
thread-local stack) whenever at least one input requires a gradient.
Outside any tape, operations simply compute values, which is how
evaluation passes avoid bookkeeping::

    W = Variable(w0, requires_grad=True)
    with Tape():
        loss = ad.sum(ad.relu(ad.matmul(X, W)))
    ad.backward(loss)
    W.grad

The edge/node gate primitives evaluate ``T diag(v) T^T`` (resp.
``T^T diag(w) T``) only on the stored entries of a normalized adjacency,
so neither the dense gate matrix nor any ``N x N`` intermediate is formed.
"""
from __future__ import annotations

import itertools
import threading
import weakref
from dataclasses import dataclass

import numpy as np

from .exceptions import ConstructionError, ContractError, NumericalError, ShapeError, UnsupportedInputError
from .tensor import SparseMatrix, pattern_matmul

__all__ = [
    "Tape",
    "Variable",
    "backward",
    "custom_op",
    "matmul",
    "transpose",
    "spmm_const",
    "sparse_matmul",
    "masked_hadamard_var",
    "edge_gate_index",
    "node_gate_index",
    "edge_gate_on_pattern",
    "node_gate_on_pattern",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "log_sigmoid",
    "abs",
    "identity",
    "dropout",
    "add",
    "sub",
    "scale",
    "elementwise_mul",
    "sum",
    "mean_pool_rows",
    "log_softmax_rows",
    "gather",
    "take_rows",
]

_state = threading.local()


def _stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def current_tape():
    stack = _stack()
    return stack[-1] if stack else None


@dataclass
class _Node:
    out: "Variable"
    inputs: tuple
    backward: object


class Tape:
    """Ordered record of operations; recording order is a topological order."""

    def __init__(self):
        self.nodes = []
        self._ids = itertools.count()

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def record(self, out, inputs, backward_fn):
        out._node = (self, len(self.nodes))
        out.id = next(self._ids)
        self.nodes.append(_Node(out, tuple(inputs), backward_fn))

    def __len__(self):
        return len(self.nodes)


class Variable:
    """A matrix value plus a lazily allocated gradient slot."""

    _leaf_ids = itertools.count()

    def __init__(self, value, requires_grad=False, name=None):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        elif value.ndim == 1:
            value = value.reshape(-1, 1)
        elif value.ndim != 2:
            raise ShapeError(f"Variable values must be at most 2-D, got {value.shape}")
        self.value = value
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.id = next(Variable._leaf_ids)
        self._grad = None
        self._node = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return self._node is None

    @property
    def grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = None if g is None else np.asarray(g, dtype=np.float64).reshape(self.shape)

    def zero_grad(self):
        self._grad = None

    def _accumulate(self, g):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.shape:
            raise ShapeError(f"gradient shape {g.shape} != value shape {self.shape}")
        self._grad = g.copy() if self._grad is None else self._grad + g

    def item(self):
        return float(self.value.reshape(-1)[0])

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Variable{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(x):
    return x if isinstance(x, Variable) else Variable(x)


def custom_op(value, inputs, backward_fn):
    """Create the output of a differentiable operation.

    ``backward_fn(g)`` receives the upstream gradient (same shape as
    ``value``) and returns one gradient (or ``None``) per input.
    """
    tape = current_tape()
    needs = tape is not None and any(v.requires_grad for v in inputs)
    out = Variable(value, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward_fn)
    return out


def backward(loss):
    """Accumulate ``d loss / d leaf`` into every leaf that requires a gradient."""
    if loss.shape != (1, 1):
        raise ContractError(f"backward expects a 1x1 loss, got {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any variable that requires a gradient")
    seed = np.ones((1, 1))
    if loss._node is None:
        loss._accumulate(seed)
        return
    tape, idx = loss._node
    pending = {id(loss): seed}
    for node in reversed(tape.nodes[: idx + 1]):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp._accumulate(gi)
            elif id(inp) in pending:
                pending[id(inp)] = pending[id(inp)] + gi
            else:
                pending[id(inp)] = gi


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return g.sum(keepdims=True)
    if shape[0] == 1:
        return g.sum(axis=0, keepdims=True)
    if shape[1] == 1:
        return g.sum(axis=1, keepdims=True)
    raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- linear algebra -------------------------------------------------------------

def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return custom_op(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a):
    a = _wrap(a)
    return custom_op(a.value.T.copy(), (a,), lambda g: (g.T,))


def spmm_const(S: SparseMatrix, d):
    """``S @ d`` with ``S`` a constant sparse matrix."""
    d = _wrap(d)
    if S.shape[1] != d.shape[0]:
        raise ShapeError(f"spmm_const: {S.shape} @ {d.shape}")
    mat = S._scipy
    return custom_op(np.asarray(mat @ d.value), (d,), lambda g: (np.asarray(mat.T @ g),))


def sparse_matmul(values, pattern: SparseMatrix, d):
    """``M @ d`` where ``M`` has the pattern of ``pattern`` and trainable values.

    ``values`` is an ``nnz x 1`` variable aligned with ``pattern.data``.
    """
    values, d = _wrap(values), _wrap(d)
    if values.shape != (pattern.nnz, 1):
        raise ShapeError(f"sparse_matmul: {values.shape[0]} values for {pattern.nnz} entries")
    if pattern.shape[1] != d.shape[0]:
        raise ShapeError(f"sparse_matmul: {pattern.shape} @ {d.shape}")
    if not np.all(np.isfinite(values.value)):
        raise NumericalError("sparse_matmul: non-finite pattern values")
    vv = values.value
    rows, cols, dv = pattern.row_ids, pattern.indices, d.value

    def back(g):
        gvals = np.einsum("ij,ij->i", g[rows], dv[cols]).reshape(-1, 1)
        return gvals, pattern_matmul(pattern, vv, g, transpose=True)

    return custom_op(pattern_matmul(pattern, vv, dv), (values, d), back)


def masked_hadamard_var(gate, S: SparseMatrix):
    """Values of ``gate (.) S`` on the pattern of ``S`` (``nnz x 1``)."""
    gate = _wrap(gate)
    if gate.shape != (S.nnz, 1):
        raise ShapeError(f"masked_hadamard_var: {gate.shape[0]} gate values for {S.nnz} entries")
    s = S.data.reshape(-1, 1)
    return custom_op(gate.value * s, (gate,), lambda g: (g * s,))


# -- fused line-graph gates -----------------------------------------------------

@dataclass(frozen=True)
class GateIndex:
    """Where each stored pattern entry reads its gate value from.

    Off-diagonal entry ``k`` reads ``source[offdiag_src[k]]``; diagonal entry
    ``k`` sums the sources listed for ``diag_rows[k]``.
    """

    offdiag_pos: np.ndarray
    offdiag_src: np.ndarray
    diag_pos: np.ndarray
    diag_rows: np.ndarray


def _edge_endpoints(T: SparseMatrix):
    Tt = T.transpose()
    counts = np.diff(Tt.indptr)
    if np.any(counts != 2) or np.any(Tt.data != 1.0):
        raise ConstructionError("every column of the incidence matrix must hold exactly two ones")
    return Tt.indices.reshape(-1, 2)


_gate_cache: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def _cached(kind, T, pattern, build):
    per_pattern = _gate_cache.setdefault(pattern, {})
    hit = per_pattern.get(kind)
    if hit is not None and hit[0]() is T:
        return hit[1]
    index = build(T, pattern)
    per_pattern[kind] = (weakref.ref(T), index)
    return index


def edge_gate_index(T: SparseMatrix, pattern: SparseMatrix) -> GateIndex:
    """Map entries of an ``N_v x N_v`` pattern to edges of ``T``."""
    n_v, n_e = T.shape
    if pattern.shape != (n_v, n_v):
        raise ShapeError(f"pattern {pattern.shape} does not match {n_v} nodes")
    ends = _edge_endpoints(T) if n_e else np.zeros((0, 2), dtype=np.int64)
    keys = ends[:, 0] * n_v + ends[:, 1]
    order = np.argsort(keys, kind="stable")
    skeys = keys[order]
    if skeys.size > 1 and np.any(skeys[1:] == skeys[:-1]):
        raise UnsupportedInputError("parallel edges are not supported")
    diag = pattern.diagonal_mask
    off = np.flatnonzero(~diag)
    r, c = pattern.row_ids[off], pattern.indices[off]
    q = np.minimum(r, c) * n_v + np.maximum(r, c)
    loc = np.searchsorted(skeys, q)
    loc = np.minimum(loc, max(skeys.size - 1, 0))
    if off.size and (skeys.size == 0 or np.any(skeys[loc] != q)):
        bad = off[0] if skeys.size == 0 else off[np.flatnonzero(skeys[loc] != q)[0]]
        raise ConstructionError(
            f"pattern entry ({pattern.row_ids[bad]}, {pattern.indices[bad]}) has no corresponding edge"
        )
    src = order[loc] if off.size else np.zeros(0, dtype=np.int64)
    dpos = np.flatnonzero(diag)
    return GateIndex(off, src, dpos, pattern.row_ids[dpos])


def node_gate_index(T: SparseMatrix, pattern: SparseMatrix) -> GateIndex:
    """Map entries of an ``N_e x N_e`` pattern to the node two edges share."""
    n_v, n_e = T.shape
    if pattern.shape != (n_e, n_e):
        raise ShapeError(f"pattern {pattern.shape} does not match {n_e} edges")
    ends = _edge_endpoints(T) if n_e else np.zeros((0, 2), dtype=np.int64)
    diag = pattern.diagonal_mask
    off = np.flatnonzero(~diag)
    a = ends[pattern.row_ids[off]]
    b = ends[pattern.indices[off]]
    match = a[:, :, None] == b[:, None, :]  # (k, 2, 2)
    n_shared = match.sum(axis=(1, 2))
    if np.any(n_shared >= 2):
        raise UnsupportedInputError("two edges share both endpoints (multigraph)")
    if np.any(n_shared == 0):
        k = off[np.flatnonzero(n_shared == 0)[0]]
        raise ConstructionError(
            f"edges {pattern.row_ids[k]} and {pattern.indices[k]} share no node"
        )
    shared = np.where(match[:, 0, :].any(axis=1), a[:, 0], a[:, 1])
    dpos = np.flatnonzero(diag)
    return GateIndex(off, shared, dpos, pattern.row_ids[dpos])


def edge_gate_on_pattern(T: SparseMatrix, v, pattern: SparseMatrix, add_identity=False, index=None):
    """Entries of ``T diag(v) T^T`` (``+ I`` if ``add_identity``) on ``pattern``.

    Returns an ``nnz x 1`` variable aligned with ``pattern.data``. The
    backward pass scatters gradients into ``v``, which is how node layers
    train edge-side parameters.
    """
    v = _wrap(v)
    n_v, n_e = T.shape
    if v.shape != (n_e, 1):
        raise ShapeError(f"edge gate expects {n_e}x1 edge values, got {v.shape}")
    if index is None:
        index = _cached("edge", T, pattern, edge_gate_index)
    tmat = T._scipy
    vv = v.value
    out = np.zeros((pattern.nnz, 1))
    out[index.offdiag_pos] = vv[index.offdiag_src]
    if index.diag_pos.size:
        node_sum = np.asarray(tmat @ vv) if n_e else np.zeros((n_v, 1))
        out[index.diag_pos] = node_sum[index.diag_rows] + (1.0 if add_identity else 0.0)

    def back(g):
        gv = np.bincount(index.offdiag_src, weights=g[index.offdiag_pos, 0], minlength=n_e)
        if index.diag_pos.size and n_e:
            per_node = np.bincount(index.diag_rows, weights=g[index.diag_pos, 0], minlength=n_v)
            gv = gv + np.asarray(tmat.T @ per_node)
        return (gv.reshape(-1, 1),)

    return custom_op(out, (v,), back)


def node_gate_on_pattern(T: SparseMatrix, w, pattern: SparseMatrix, add_identity=False, index=None):
    """Entries of ``T^T diag(w) T`` (``+ I`` if ``add_identity``) on ``pattern``."""
    w = _wrap(w)
    n_v, n_e = T.shape
    if w.shape != (n_v, 1):
        raise ShapeError(f"node gate expects {n_v}x1 node values, got {w.shape}")
    if index is None:
        index = _cached("node", T, pattern, node_gate_index)
    tmat = T._scipy
    wv = w.value
    out = np.zeros((pattern.nnz, 1))
    out[index.offdiag_pos] = wv[index.offdiag_src]
    if index.diag_pos.size:
        edge_sum = np.asarray(tmat.T @ wv)
        out[index.diag_pos] = edge_sum[index.diag_rows] + (1.0 if add_identity else 0.0)

    def back(g):
        gw = np.bincount(index.offdiag_src, weights=g[index.offdiag_pos, 0], minlength=n_v)
        if index.diag_pos.size:
            per_edge = np.bincount(index.diag_rows, weights=g[index.diag_pos, 0], minlength=n_e)
            gw = gw + np.asarray(tmat @ per_edge)
        return (gw.reshape(-1, 1),)

    return custom_op(out, (w,), back)


# -- elementwise -----------------------------------------------------------------

def relu(x):
    x = _wrap(x)
    pos = x.value > 0
    return custom_op(np.where(pos, x.value, 0.0), (x,), lambda g: (g * pos,))


def _sigmoid(z):
    out = np.empty_like(z)
    p = z >= 0
    out[p] = 1.0 / (1.0 + np.exp(-z[p]))
    e = np.exp(z[~p])
    out[~p] = e / (1.0 + e)
    return out


def sigmoid(x):
    x = _wrap(x)
    s = _sigmoid(x.value)
    return custom_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def log_sigmoid(x):
    """``log(sigmoid(x))`` without overflow."""
    x = _wrap(x)
    z = x.value
    val = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))
    return custom_op(val, (x,), lambda g: (g * _sigmoid(-z),))


def tanh(x):
    x = _wrap(x)
    t = np.tanh(x.value)
    return custom_op(t, (x,), lambda g: (g * (1.0 - t * t),))


def exp(x):
    x = _wrap(x)
    e = np.exp(x.value)
    return custom_op(e, (x,), lambda g: (g * e,))


def log(x, floor=0.0):
    """Natural log; inputs below ``floor`` are clamped (gradient taken at the clamp)."""
    x = _wrap(x)
    xv = np.maximum(x.value, floor) if floor > 0 else x.value
    return custom_op(np.log(xv), (x,), lambda g: (g / xv,))


def abs(x):  # noqa: A001 - mirrors numpy naming
    x = _wrap(x)
    s = np.sign(x.value)
    return custom_op(np.abs(x.value), (x,), lambda g: (g * s,))


def identity(x):
    return _wrap(x)


def dropout(x, rate, rng=None, train=True, mask=None):
    """Inverted dropout. Identity when ``train`` is false or ``rate`` is 0.

    A precomputed boolean ``mask`` (True = keep) freezes the pattern.
    """
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    x = _wrap(x)
    if not train or rate == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ContractError("dropout in train mode needs an rng or a mask")
        mask = rng.random(x.shape) >= rate
    elif mask.shape != x.shape:
        raise ShapeError(f"dropout mask {mask.shape} != input {x.shape}")
    factor = mask / (1.0 - rate)
    return custom_op(x.value * factor, (x,), lambda g: (g * factor,))


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return custom_op(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return custom_op(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def scale(a, c):
    a = _wrap(a)
    c = float(c)
    return custom_op(a.value * c, (a,), lambda g: (g * c,))


def elementwise_mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "elementwise_mul")
    av, bv = a.value, b.value
    return custom_op(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def sum(a):  # noqa: A001 - mirrors numpy naming
    a = _wrap(a)
    shape = a.shape
    return custom_op(a.value.sum(keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


# -- structured ----------------------------------------------------------------

def mean_pool_rows(x, segment_ids, num_segments=None):
    """Average the rows of ``x`` within each segment; one output row per segment."""
    x = _wrap(x)
    seg = np.asarray(segment_ids, dtype=np.int64).ravel()
    if seg.shape != (x.shape[0],):
        raise ShapeError(f"{seg.shape[0]} segment ids for {x.shape[0]} rows")
    q = int(num_segments) if num_segments is not None else (int(seg.max()) + 1 if seg.size else 0)
    counts = np.bincount(seg, minlength=q).astype(np.float64)
    if counts.shape[0] > q or np.any(counts == 0):
        raise ContractError("every segment must contain at least one row")
    sums = np.zeros((q, x.shape[1]))
    np.add.at(sums, seg, x.value)
    inv = (1.0 / counts).reshape(-1, 1)
    return custom_op(sums * inv, (x,), lambda g: ((g * inv)[seg],))


def log_softmax_rows(x):
    x = _wrap(x)
    z = x.value - x.value.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    soft = np.exp(out)
    return custom_op(out, (x,), lambda g: (g - soft * g.sum(axis=1, keepdims=True),))


def gather(x, rows, cols):
    """Entries ``x[rows[k], cols[k]]`` as a ``k x 1`` variable."""
    x = _wrap(x)
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, (rows, cols), g[:, 0])
        return (out,)

    return custom_op(x.value[rows, cols].reshape(-1, 1), (x,), back)


def take_rows(x, rows):
    x = _wrap(x)
    rows = np.asarray(rows, dtype=np.int64).ravel()
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, rows, g)
        return (out,)

    return custom_op(x.value[rows], (x,), back)
