"""Dense and CSR sparse matrices with the kernels the propagation rules need.

Dense matrices are plain 2-D ``float64`` numpy arrays. Sparse matrices use
:class:`SparseMatrix`, an immutable CSR container whose column indices are
sorted within each row. ``spmm`` delegates the product itself to
``scipy.sparse``; everything else here is pattern bookkeeping.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .exceptions import ShapeError, ValidationError

__all__ = [
    "SparseMatrix",
    "as_dense",
    "spmm",
    "masked_hadamard",
    "sym_normalize",
    "matmul",
    "transpose",
    "add",
    "scale",
    "row_sum",
    "col_select",
    "concat_rows",
]


def as_dense(a, name="matrix"):
    """Coerce ``a`` to a 2-D float64 array, rejecting non-finite entries."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Immutable CSR matrix with strictly increasing column indices per row.

    Explicit zeros are allowed: a gate that evaluates to zero keeps its
    slot so the pattern of the operand survives.
    """

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    shape: tuple

    def __post_init__(self):
        indptr = np.ascontiguousarray(self.indptr, dtype=np.int64)
        indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        n, m = (int(s) for s in self.shape)
        if n < 0 or m < 0:
            raise ShapeError(f"negative shape {self.shape}")
        if indptr.shape != (n + 1,) or indptr[0] != 0:
            raise ValidationError("indptr must have length rows+1 and start at 0")
        if np.any(np.diff(indptr) < 0):
            raise ValidationError("indptr must be monotone")
        nnz = int(indptr[-1])
        if indices.shape != (nnz,) or data.shape != (nnz,):
            raise ValidationError("indices/data length must equal indptr[-1]")
        if nnz:
            if indices.min() < 0 or indices.max() >= m:
                raise ValidationError("column index out of range")
            # strictly increasing within rows: a drop is only allowed at a row start
            step = np.diff(indices)
            row_start = np.zeros(nnz, dtype=bool)
            row_start[indptr[1:-1][indptr[1:-1] < nnz]] = True
            if np.any((step <= 0) & ~row_start[1:]):
                raise ValidationError("column indices must be strictly increasing within each row")
        if not np.all(np.isfinite(data)):
            raise ValidationError("sparse values must be finite")
        indptr.setflags(write=False)
        indices.setflags(write=False)
        data.setflags(write=False)
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "shape", (n, m))

    # -- constructors ---------------------------------------------------
    @classmethod
    def from_coo(cls, rows, cols, values, shape, sum_duplicates=True):
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        values = np.broadcast_to(np.asarray(values, dtype=np.float64), rows.shape)
        n, m = shape
        if rows.size and (rows.min() < 0 or rows.max() >= n or cols.min() < 0 or cols.max() >= m):
            raise ShapeError("coordinate out of range")
        order = np.lexsort((cols, rows))
        rows, cols, values = rows[order], cols[order], values[order]
        if rows.size:
            new = np.ones(rows.size, dtype=bool)
            new[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
            if not new.all():
                if not sum_duplicates:
                    raise ValidationError("duplicate coordinates")
                group = np.cumsum(new) - 1
                values = np.bincount(group, weights=values)
                rows, cols = rows[new], cols[new]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        return cls(np.cumsum(indptr), cols, values, (n, m))

    @classmethod
    def from_dense(cls, dense, keep_zeros=False):
        dense = as_dense(dense)
        if keep_zeros:
            rows, cols = np.indices(dense.shape).reshape(2, -1)
        else:
            rows, cols = np.nonzero(dense)
        return cls.from_coo(rows, cols, dense[rows, cols], dense.shape)

    @classmethod
    def from_scipy(cls, mat):
        mat = sp.csr_matrix(mat, dtype=np.float64)
        mat.sort_indices()
        return cls(mat.indptr, mat.indices, mat.data, mat.shape)

    @classmethod
    def identity(cls, n):
        return cls(np.arange(n + 1), np.arange(n), np.ones(n), (n, n))

    @classmethod
    def empty(cls, n, m):
        return cls(np.zeros(n + 1, dtype=np.int64), np.zeros(0), np.zeros(0), (n, m))

    # -- views ------------------------------------------------------------
    @property
    def nnz(self):
        return int(self.indptr[-1])

    @cached_property
    def row_ids(self):
        """Row index of every stored entry, aligned with ``data``."""
        out = np.repeat(np.arange(self.shape[0], dtype=np.int64), np.diff(self.indptr))
        out.setflags(write=False)
        return out

    @cached_property
    def diagonal_mask(self):
        """Boolean flag per stored entry: does it sit on the diagonal?"""
        out = self.row_ids == self.indices
        out.setflags(write=False)
        return out

    @cached_property
    def _scipy(self):
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=self.shape)

    def to_scipy(self):
        return self._scipy.copy()

    def to_dense(self):
        out = np.zeros(self.shape)
        out[self.row_ids, self.indices] = self.data
        return out

    def with_data(self, data):
        """Same pattern, new values."""
        data = np.asarray(data, dtype=np.float64).ravel()
        if data.shape != (self.nnz,):
            raise ShapeError(f"expected {self.nnz} values, got {data.shape[0]}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("sparse values must be finite")
        # the pattern is already validated; skip the structural checks on this hot path
        out = object.__new__(SparseMatrix)
        data = np.array(data, dtype=np.float64)
        data.setflags(write=False)
        for name, value in (("indptr", self.indptr), ("indices", self.indices), ("data", data), ("shape", self.shape)):
            object.__setattr__(out, name, value)
        return out

    def transpose(self):
        return SparseMatrix.from_coo(self.indices, self.row_ids, self.data, self.shape[::-1])

    @property
    def T(self):
        return self.transpose()

    def same_pattern(self, other):
        return (
            self.shape == other.shape
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
        )

    def is_symmetric(self, atol=0.0):
        t = self.transpose()
        if not self.same_pattern(t):
            # explicit zeros may legitimately break pattern symmetry; compare values
            return bool(np.allclose(self.to_dense(), t.to_dense(), atol=atol, rtol=0))
        return bool(np.allclose(self.data, t.data, atol=atol, rtol=0))

    def __repr__(self):
        return f"SparseMatrix(shape={self.shape}, nnz={self.nnz})"


def spmm(S: SparseMatrix, D) -> np.ndarray:
    """Exact sparse-dense product ``S @ D``."""
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or S.shape[1] != D.shape[0]:
        raise ShapeError(f"spmm: {S.shape} @ {D.shape}")
    if S.nnz == 0:
        return np.zeros((S.shape[0], D.shape[1]))
    return np.asarray(S._scipy @ D)


def pattern_matmul(S: SparseMatrix, values, D, transpose=False):
    """``M @ D`` (or ``M.T @ D``) for ``M`` with the pattern of ``S`` and the given values.

    The pattern is already validated, so this skips ``SparseMatrix``
    construction and hands the arrays straight to the CSR kernel.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    mat = sp.csr_matrix((values, S.indices, S.indptr), shape=S.shape)
    return np.asarray((mat.T if transpose else mat) @ D)


def masked_hadamard(G, S: SparseMatrix) -> SparseMatrix:
    """Elementwise product of gate values ``G`` with ``S`` on the pattern of ``S``.

    ``G`` is either a vector aligned with ``S.data`` or a :class:`SparseMatrix`
    sharing the pattern of ``S``.
    """
    if isinstance(G, SparseMatrix):
        if not G.same_pattern(S):
            raise ShapeError("masked_hadamard: gate pattern differs from operand pattern")
        values = G.data
    else:
        values = np.asarray(G, dtype=np.float64).ravel()
        if values.shape != (S.nnz,):
            raise ShapeError(f"masked_hadamard: {values.shape[0]} gate values for {S.nnz} entries")
    return S.with_data(values * S.data)


def sym_normalize(A: SparseMatrix, add_self_loops=True) -> SparseMatrix:
    """``D^-1/2 (A + I) D^-1/2`` with ``D`` the degree matrix of ``A + I``.

    The diagonal is always stored when self-loops are added, so an isolated
    node keeps a lone ``1`` on its diagonal.
    """
    n, m = A.shape
    if n != m:
        raise ValidationError(f"sym_normalize expects a square matrix, got {A.shape}")
    if np.any(A.data < 0):
        raise ValidationError("sym_normalize expects nonnegative entries")
    if not A.is_symmetric(atol=1e-12):
        raise ValidationError("sym_normalize expects a symmetric matrix")
    if add_self_loops:
        rows = np.concatenate([A.row_ids, np.arange(n)])
        cols = np.concatenate([A.indices, np.arange(n)])
        vals = np.concatenate([A.data, np.ones(n)])
        A = SparseMatrix.from_coo(rows, cols, vals, (n, n))
    deg = np.bincount(A.row_ids, weights=A.data, minlength=n)
    inv_sqrt = np.zeros(n)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    return A.with_data(A.data * inv_sqrt[A.row_ids] * inv_sqrt[A.indices])


# -- dense plumbing -------------------------------------------------------------

def matmul(a, b):
    a, b = as_dense(a), as_dense(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return a @ b


def transpose(a):
    return as_dense(a).T.copy()


def add(a, b):
    a, b = as_dense(a), as_dense(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} + {b.shape}")
    return a + b


def scale(a, c):
    return as_dense(a) * float(c)


def row_sum(a):
    return as_dense(a).sum(axis=1)


def col_select(a, cols):
    a = as_dense(a)
    cols = np.asarray(cols, dtype=np.int64)
    if cols.size and (cols.min() < -a.shape[1] or cols.max() >= a.shape[1]):
        raise ShapeError("col_select: column out of range")
    return a[:, cols]


def concat_rows(blocks):
    blocks = [as_dense(b) for b in blocks]
    if not blocks:
        raise ShapeError("concat_rows needs at least one block")
    widths = {b.shape[1] for b in blocks}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows: inconsistent widths {sorted(widths)}")
    return np.vstack(blocks)
