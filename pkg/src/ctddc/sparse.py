"""Sparse matrix storage formats and kernels with reusable sparsity patterns.

Matrices are built in coordinate (COO) form and converted to compressed
sparse row (CSR) form for computation.  Compressed sparse column support is
provided as the CSR of the transpose.  A :class:`SparsityPattern` freezes the
structural arrays of a CSR matrix together with a map from logical transition
labels to slots in the value array, so that repeated rebuilds with new
parameter values touch only the values.

All indices are 0-based.  Matrices are immutable after construction except
through :func:`update_values`; reads and :func:`spmv` are pure and safe to
call concurrently.
"""

from __future__ import annotations

from typing import Hashable, Iterable, Sequence

import numpy as np

__all__ = [
    "SparseFormatError",
    "UnknownAddressError",
    "CooMatrix",
    "CsrMatrix",
    "SparsityPattern",
    "coo_to_csr",
    "csr_to_csc",
    "spmv",
    "update_values",
    "write_matrix_market",
    "read_matrix_market",
]


class SparseFormatError(ValueError):
    """Raised when arrays do not form a valid sparse matrix."""


class UnknownAddressError(KeyError):
    """Raised when a value update refers to a label outside the pattern."""


def _as_index_array(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.int64)
    if arr.ndim != 1:
        raise SparseFormatError(f"{name} must be one-dimensional")
    return arr


def _as_value_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise SparseFormatError("values must be one-dimensional")
    return arr


class CooMatrix:
    """Coordinate-format sparse matrix.

    Parameters
    ----------
    n_rows, n_cols : int
        Matrix dimensions.
    row_idx, col_idx : array_like of int
        Row and column index of each stored entry.
    values : array_like of float
        Stored entry values; same length as the index arrays.

    Raises
    ------
    SparseFormatError
        If array lengths differ, an index is out of range, or a
        (row, col) coordinate appears more than once.  Duplicates are
        rejected rather than summed: assembly generates each transition
        exactly once, so a duplicate indicates a bug upstream.
    """

    def __init__(self, n_rows: int, n_cols: int, row_idx, col_idx, values):
        self.n_rows = int(n_rows)
        self.n_cols = int(n_cols)
        if self.n_rows < 0 or self.n_cols < 0:
            raise SparseFormatError("matrix dimensions must be nonnegative")
        self.row_idx = _as_index_array(row_idx, "row_idx")
        self.col_idx = _as_index_array(col_idx, "col_idx")
        self.values = _as_value_array(values)
        if not (len(self.row_idx) == len(self.col_idx) == len(self.values)):
            raise SparseFormatError("row_idx, col_idx and values must have equal length")
        if self.nnz:
            if self.row_idx.min() < 0 or self.row_idx.max() >= self.n_rows:
                raise SparseFormatError("row index out of range")
            if self.col_idx.min() < 0 or self.col_idx.max() >= self.n_cols:
                raise SparseFormatError("column index out of range")
            flat = self.row_idx * self.n_cols + self.col_idx
            if len(np.unique(flat)) != self.nnz:
                raise SparseFormatError("duplicate (row, col) coordinate in COO input")

    @property
    def nnz(self) -> int:
        return len(self.values)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n_rows, self.n_cols))
        dense[self.row_idx, self.col_idx] = self.values
        return dense

    @classmethod
    def from_dense(cls, dense) -> "CooMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        rows, cols = np.nonzero(dense)
        return cls(dense.shape[0], dense.shape[1], rows, cols, dense[rows, cols])

    def __repr__(self) -> str:
        return f"CooMatrix({self.n_rows}x{self.n_cols}, nnz={self.nnz})"


class CsrMatrix:
    """Compressed sparse row matrix.

    ``row_ptr`` has length ``n_rows + 1`` with ``row_ptr[0] == 0`` and
    ``row_ptr[n_rows] == nnz``; row ``k`` occupies slots
    ``row_ptr[k]:row_ptr[k+1]`` of ``col_idx`` and ``values``.  Column
    indices are kept strictly increasing within each row so that row merges
    and dense comparisons are deterministic.
    """

    def __init__(self, n_rows: int, n_cols: int, row_ptr, col_idx, values):
        self.n_rows = int(n_rows)
        self.n_cols = int(n_cols)
        self.row_ptr = _as_index_array(row_ptr, "row_ptr")
        self.col_idx = _as_index_array(col_idx, "col_idx")
        self.values = _as_value_array(values)
        if len(self.row_ptr) != self.n_rows + 1:
            raise SparseFormatError("row_ptr must have length n_rows + 1")
        if self.row_ptr[0] != 0 or self.row_ptr[-1] != self.nnz:
            raise SparseFormatError("row_ptr must start at 0 and end at nnz")
        if np.any(np.diff(self.row_ptr) < 0):
            raise SparseFormatError("row_ptr must be nondecreasing")
        if len(self.col_idx) != self.nnz:
            raise SparseFormatError("col_idx and values must have equal length")
        if self.nnz:
            if self.col_idx.min() < 0 or self.col_idx.max() >= self.n_cols:
                raise SparseFormatError("column index out of range")
            # Strictly increasing within rows: ascending everywhere except
            # where a new row starts.
            interior = np.ones(self.nnz - 1, dtype=bool)
            row_starts = self.row_ptr[1:-1]
            interior[row_starts[(row_starts > 0) & (row_starts < self.nnz)] - 1] = False
            if np.any(np.diff(self.col_idx)[interior] <= 0):
                raise SparseFormatError("column indices must be strictly increasing within each row")
        self._row_of_slot: np.ndarray | None = None

    @property
    def nnz(self) -> int:
        return len(self.values)

    def row_of_slot(self) -> np.ndarray:
        """Row index of each stored slot (cached; structure is immutable)."""
        if self._row_of_slot is None:
            self._row_of_slot = np.repeat(
                np.arange(self.n_rows, dtype=np.int64), np.diff(self.row_ptr)
            )
        return self._row_of_slot

    def diagonal(self) -> np.ndarray:
        """Dense main diagonal (zeros where no entry is stored)."""
        diag = np.zeros(min(self.n_rows, self.n_cols))
        mask = self.col_idx == self.row_of_slot()
        diag[self.col_idx[mask]] = self.values[mask]
        return diag

    def row_sums(self) -> np.ndarray:
        return np.bincount(self.row_of_slot(), weights=self.values, minlength=self.n_rows)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n_rows, self.n_cols))
        dense[self.row_of_slot(), self.col_idx] = self.values
        return dense

    def with_values(self, values) -> "CsrMatrix":
        """New matrix sharing this structure with a different value array."""
        values = _as_value_array(values)
        if len(values) != self.nnz:
            raise SparseFormatError("value array length does not match pattern")
        out = CsrMatrix.__new__(CsrMatrix)
        out.n_rows = self.n_rows
        out.n_cols = self.n_cols
        out.row_ptr = self.row_ptr
        out.col_idx = self.col_idx
        out.values = values
        out._row_of_slot = self._row_of_slot
        return out

    def __repr__(self) -> str:
        return f"CsrMatrix({self.n_rows}x{self.n_cols}, nnz={self.nnz})"


def coo_to_csr(a: CooMatrix) -> CsrMatrix:
    """Convert a COO matrix to CSR form.

    Entries are ordered lexicographically by (row, col), so the resulting
    CSR holds exactly the same nonzeros with sorted columns in every row.
    """
    order = np.lexsort((a.col_idx, a.row_idx))
    row_ptr = np.zeros(a.n_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(a.row_idx, minlength=a.n_rows), out=row_ptr[1:])
    return CsrMatrix(a.n_rows, a.n_cols, row_ptr, a.col_idx[order], a.values[order])


def csr_to_csc(a: CsrMatrix) -> CsrMatrix:
    """CSR of the transpose of ``a``.

    Interpreting the result as the original matrix's CSC form: its row
    pointers are the CSC column pointers and its column indices are the CSC
    row indices.  Applying the conversion twice is the identity.
    """
    coo = CooMatrix(a.n_cols, a.n_rows, a.col_idx, a.row_of_slot(), a.values)
    return coo_to_csr(coo)


def spmv(a: CsrMatrix, x) -> np.ndarray:
    """Sparse matrix-vector product ``a @ x``, touching stored entries only."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (a.n_cols,):
        raise SparseFormatError(f"vector has length {x.shape}, expected ({a.n_cols},)")
    if a.nnz == 0:
        return np.zeros(a.n_rows)
    return np.bincount(a.row_of_slot(), weights=a.values * x[a.col_idx], minlength=a.n_rows)


class SparsityPattern:
    """Frozen CSR structure plus an address map for value slots.

    The address map sends each logical entry label (any hashable; models use
    tuples such as ``("nature", k, l)`` and ``("diag", k)``) to its position
    in the value array, a bijection onto ``range(nnz)``.  The structural
    arrays are shared, never copied, by every matrix using the pattern, so
    pattern reuse is observable as array identity.
    """

    def __init__(self, n_rows: int, n_cols: int, row_ptr, col_idx,
                 addresses: dict[Hashable, int]):
        self.n_rows = int(n_rows)
        self.n_cols = int(n_cols)
        self.row_ptr = _as_index_array(row_ptr, "row_ptr")
        self.col_idx = _as_index_array(col_idx, "col_idx")
        self.addresses = dict(addresses)
        if len(self.addresses) != len(self.col_idx):
            raise SparseFormatError("address map must be a bijection onto value slots")
        slots = sorted(self.addresses.values())
        if slots != list(range(len(self.col_idx))):
            raise SparseFormatError("address map must cover every value slot exactly once")

    @property
    def nnz(self) -> int:
        return len(self.col_idx)

    @classmethod
    def from_coo(cls, a: CooMatrix, labels: Sequence[Hashable]) -> "SparsityPattern":
        """Build a pattern from labelled COO entries.

        ``labels[i]`` names entry ``(row_idx[i], col_idx[i])``; positions in
        the address map refer to the CSR ordering.
        """
        if len(labels) != a.nnz:
            raise SparseFormatError("one label required per COO entry")
        order = np.lexsort((a.col_idx, a.row_idx))
        row_ptr = np.zeros(a.n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(a.row_idx, minlength=a.n_rows), out=row_ptr[1:])
        addresses = {labels[src]: pos for pos, src in enumerate(order)}
        if len(addresses) != a.nnz:
            raise SparseFormatError("labels must be distinct")
        return cls(a.n_rows, a.n_cols, row_ptr, a.col_idx[order], addresses)

    def position(self, label: Hashable) -> int:
        try:
            return self.addresses[label]
        except KeyError:
            raise UnknownAddressError(f"label {label!r} is not in the pattern") from None

    def positions(self, labels: Iterable[Hashable]) -> np.ndarray:
        return np.array([self.position(lbl) for lbl in labels], dtype=np.int64)

    def matrix(self, values) -> CsrMatrix:
        """CSR matrix over this pattern, sharing the structural arrays."""
        values = _as_value_array(values)
        if len(values) != self.nnz:
            raise SparseFormatError("value array length does not match pattern")
        out = CsrMatrix.__new__(CsrMatrix)
        out.n_rows = self.n_rows
        out.n_cols = self.n_cols
        out.row_ptr = self.row_ptr
        out.col_idx = self.col_idx
        out.values = values
        out._row_of_slot = None
        return out

    def zeros(self) -> np.ndarray:
        return np.zeros(self.nnz)


def update_values(pattern: SparsityPattern, values: np.ndarray,
                  assignments: Iterable[tuple[Hashable, float]]) -> np.ndarray:
    """Write labelled assignments into a value array in place.

    Only ``values`` changes; the pattern's structural arrays are never
    touched.  Returns ``values`` for convenience.
    """
    if len(values) != pattern.nnz:
        raise SparseFormatError("value array length does not match pattern")
    for label, value in assignments:
        values[pattern.position(label)] = value
    return values


def write_matrix_market(path, a: CooMatrix) -> None:
    """Write a COO matrix as Matrix Market coordinate text (1-based)."""
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        fh.write(f"{a.n_rows} {a.n_cols} {a.nnz}\n")
        for r, c, v in zip(a.row_idx, a.col_idx, a.values):
            fh.write(f"{r + 1} {c + 1} {float(v)!r}\n")


def read_matrix_market(path) -> CooMatrix:
    """Read a Matrix Market coordinate file written by :func:`write_matrix_market`."""
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("%%MatrixMarket matrix coordinate real"):
            raise SparseFormatError("not a real coordinate Matrix Market file")
        line = fh.readline()
        while line.startswith("%"):
            line = fh.readline()
        n_rows, n_cols, nnz = (int(tok) for tok in line.split())
        rows = np.empty(nnz, dtype=np.int64)
        cols = np.empty(nnz, dtype=np.int64)
        vals = np.empty(nnz)
        for i in range(nnz):
            r, c, v = fh.readline().split()
            rows[i], cols[i], vals[i] = int(r) - 1, int(c) - 1, float(v)
    return CooMatrix(n_rows, n_cols, rows, cols, vals)
