"""Local tiles and the single-rank multiply/accumulate kernels.

Flops count a multiply-add as 2.  SpGEMM keeps numerically cancelled entries in
the output pattern, so ``output_nnz`` is the number of structurally produced
entries and ``cf`` reflects the work actually performed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp


class DimensionMismatch(ValueError):
    pass


def value_dtype(w: int) -> np.dtype:
    if w == 4:
        return np.dtype(np.float32)
    if w == 8:
        return np.dtype(np.float64)
    raise ValueError(f"word size must be 4 or 8, got {w}")


def index_dtype(idx_bytes: int) -> np.dtype:
    if idx_bytes == 4:
        return np.dtype(np.int32)
    if idx_bytes == 8:
        return np.dtype(np.int64)
    raise ValueError(f"index width must be 4 or 8, got {idx_bytes}")


@dataclass
class DenseTile:
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError("dense tile values must be 2-D")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def nbytes(self) -> int:
        return self.values.nbytes

    @classmethod
    def zeros(cls, rows: int, cols: int, dtype=np.float32) -> "DenseTile":
        return cls(np.zeros((rows, cols), dtype=dtype))

    def to_dense(self) -> np.ndarray:
        return self.values


@dataclass
class CsrTile:
    rows: int
    cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.col_idx.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def nbytes(self) -> int:
        return self.values.nbytes + self.col_idx.nbytes + self.row_ptr.nbytes

    @classmethod
    def empty(cls, rows: int, cols: int, dtype=np.float32, idx=np.int32) -> "CsrTile":
        return cls(rows, cols, np.zeros(rows + 1, dtype=idx), np.zeros(0, dtype=idx),
                   np.zeros(0, dtype=dtype))

    @classmethod
    def from_coo(cls, rows: int, cols: int, r, c, v, dtype=None, idx=np.int32,
                 sum_duplicates: bool = True) -> "CsrTile":
        """Assemble from triplets; duplicates are summed (and kept even if zero)."""
        r = np.asarray(r, dtype=np.int64)
        c = np.asarray(c, dtype=np.int64)
        v = np.asarray(v)
        dtype = np.dtype(dtype) if dtype is not None else (v.dtype if v.size else np.dtype(np.float32))
        if r.size and (r.min() < 0 or r.max() >= rows or c.min() < 0 or c.max() >= cols):
            raise IndexError("coordinate outside matrix bounds")
        key = r * cols + c
        order = np.argsort(key, kind="stable")
        key = key[order]
        v = v[order].astype(dtype, copy=False)
        if key.size:
            starts = np.flatnonzero(np.concatenate(([True], key[1:] != key[:-1])))
            if sum_duplicates:
                v = np.add.reduceat(v, starts).astype(dtype, copy=False)
            elif starts.size != key.size:
                raise ValueError("duplicate coordinates")
            key = key[starts]
        out_r = key // cols if cols else key
        out_c = key - out_r * cols
        row_ptr = np.zeros(rows + 1, dtype=idx)
        np.cumsum(np.bincount(out_r, minlength=rows), out=row_ptr[1:])
        return cls(rows, cols, row_ptr, out_c.astype(idx), np.ascontiguousarray(v, dtype=dtype))

    @classmethod
    def from_dense(cls, a: np.ndarray, dtype=None, idx=np.int32) -> "CsrTile":
        a = np.asarray(a)
        r, c = np.nonzero(a)
        return cls.from_coo(a.shape[0], a.shape[1], r, c, a[r, c],
                            dtype=dtype if dtype is not None else a.dtype, idx=idx)

    @classmethod
    def from_scipy(cls, m, dtype=None, idx=np.int32) -> "CsrTile":
        m = sp.csr_matrix(m)
        m.sum_duplicates()
        m.sort_indices()
        dtype = np.dtype(dtype) if dtype is not None else m.dtype
        return cls(m.shape[0], m.shape[1], m.indptr.astype(idx), m.indices.astype(idx),
                   m.data.astype(dtype))

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.col_idx, self.row_ptr), shape=self.shape)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=self.values.dtype)
        rows = np.repeat(np.arange(self.rows), np.diff(self.row_ptr))
        out[rows, self.col_idx] = self.values
        return out

    def row_of_nnz(self) -> np.ndarray:
        return np.repeat(np.arange(self.rows, dtype=np.int64), np.diff(self.row_ptr))

    def submatrix(self, r0: int, r1: int, c0: int, c1: int) -> "CsrTile":
        lo, hi = int(self.row_ptr[r0]), int(self.row_ptr[r1])
        cols = self.col_idx[lo:hi]
        keep = (cols >= c0) & (cols < c1)
        local_rows = np.repeat(np.arange(r1 - r0), np.diff(self.row_ptr[r0:r1 + 1]))
        counts = np.bincount(local_rows[keep], minlength=r1 - r0)
        row_ptr = np.zeros(r1 - r0 + 1, dtype=self.row_ptr.dtype)
        np.cumsum(counts, out=row_ptr[1:])
        return CsrTile(r1 - r0, c1 - c0, row_ptr,
                       (cols[keep] - c0).astype(self.col_idx.dtype),
                       self.values[lo:hi][keep].copy())

    def transpose(self) -> "CsrTile":
        return CsrTile.from_coo(self.cols, self.rows, self.col_idx, self.row_of_nnz(),
                                self.values, dtype=self.values.dtype, idx=self.col_idx.dtype)

    def astype(self, dtype=None, idx=None) -> "CsrTile":
        idx = idx or self.col_idx.dtype
        return CsrTile(self.rows, self.cols, self.row_ptr.astype(idx), self.col_idx.astype(idx),
                       self.values.astype(dtype or self.values.dtype))

    def same_as(self, other: "CsrTile") -> bool:
        """Exact structural and numerical equality."""
        return (self.shape == other.shape
                and np.array_equal(self.row_ptr, other.row_ptr)
                and np.array_equal(self.col_idx, other.col_idx)
                and np.array_equal(self.values, other.values))


def check_csr(t: CsrTile) -> None:
    """Raise ``ValueError`` unless ``t`` is well-formed sorted CSR."""
    rp, ci = t.row_ptr, t.col_idx
    if rp.shape != (t.rows + 1,):
        raise ValueError(f"row_ptr has length {rp.shape[0]}, expected {t.rows + 1}")
    if rp[0] != 0 or rp[-1] != ci.shape[0] or t.values.shape != ci.shape:
        raise ValueError("row_ptr endpoints do not match nnz")
    if np.any(np.diff(rp) < 0):
        raise ValueError("row_ptr is decreasing")
    if ci.size:
        if ci.min() < 0 or ci.max() >= t.cols:
            raise ValueError("column index out of range")
        rows = t.row_of_nnz()
        same_row = rows[1:] == rows[:-1]
        if np.any(same_row & (ci[1:] <= ci[:-1])):
            raise ValueError("column indices not strictly increasing within a row")


Tile = Union[DenseTile, CsrTile]


@dataclass
class FlopMeter:
    flops: Union[int, Fraction] = 0
    output_nnz: Union[int, Fraction] = 0
    multiplies: int = field(default=0)

    @property
    def cf(self) -> Optional[Fraction]:
        if not self.output_nnz:
            return None
        return Fraction(self.flops) / Fraction(self.output_nnz)

    def __add__(self, other: "FlopMeter") -> "FlopMeter":
        return FlopMeter(self.flops + other.flops, self.output_nnz + other.output_nnz,
                         self.multiplies + other.multiplies)

    def mean(self) -> "FlopMeter":
        """Average per component multiply (cf is preserved)."""
        if not self.multiplies:
            return FlopMeter()
        n = self.multiplies
        return FlopMeter(Fraction(self.flops) / n, Fraction(self.output_nnz) / n, 1)


def _check_mul(a_shape, b_shape):
    if a_shape[1] != b_shape[0]:
        raise DimensionMismatch(f"cannot multiply {a_shape} by {b_shape}")


def spmm_local(a: CsrTile, b: DenseTile, c: DenseTile) -> FlopMeter:
    """``c += a @ b`` in place."""
    _check_mul(a.shape, b.shape)
    if c.shape != (a.rows, b.cols):
        raise DimensionMismatch(f"output tile {c.shape} != {(a.rows, b.cols)}")
    if a.nnz:
        c.values += (a.to_scipy() @ b.values).astype(c.values.dtype, copy=False)
    return FlopMeter(2 * a.nnz * b.cols, a.rows * b.cols, 1)


def spgemm_local(a: CsrTile, b: CsrTile) -> tuple[CsrTile, FlopMeter]:
    """Sparse product via row expansion, then a sorted merge of duplicates."""
    _check_mul(a.shape, b.shape)
    dtype = np.result_type(a.values.dtype, b.values.dtype)
    idx = a.col_idx.dtype
    if a.nnz == 0 or b.nnz == 0:
        return CsrTile.empty(a.rows, b.cols, dtype, idx), FlopMeter(0, 0, 1)
    k = a.col_idx.astype(np.int64)
    b_start = b.row_ptr[k].astype(np.int64)
    lengths = b.row_ptr[k + 1].astype(np.int64) - b_start
    total = int(lengths.sum())
    if total == 0:
        return CsrTile.empty(a.rows, b.cols, dtype, idx), FlopMeter(0, 0, 1)
    seg_start = np.cumsum(lengths) - lengths
    pos = np.repeat(b_start - seg_start, lengths) + np.arange(total, dtype=np.int64)
    out_r = np.repeat(a.row_of_nnz(), lengths)
    out_c = b.col_idx[pos]
    out_v = np.repeat(a.values.astype(dtype), lengths) * b.values[pos].astype(dtype)
    c = CsrTile.from_coo(a.rows, b.cols, out_r, out_c, out_v, dtype=dtype, idx=idx)
    return c, FlopMeter(2 * total, c.nnz, 1)


def csr_add(a: CsrTile, b: CsrTile) -> CsrTile:
    if a.shape != b.shape:
        raise DimensionMismatch(f"cannot add {a.shape} and {b.shape}")
    if b.nnz == 0:
        return a
    if a.nnz == 0:
        return b
    dtype = np.result_type(a.values.dtype, b.values.dtype)
    return CsrTile.from_coo(a.rows, a.cols,
                            np.concatenate((a.row_of_nnz(), b.row_of_nnz())),
                            np.concatenate((a.col_idx, b.col_idx)),
                            np.concatenate((a.values, b.values)),
                            dtype=dtype, idx=a.col_idx.dtype)


def dense_add(a: DenseTile, b: DenseTile) -> DenseTile:
    if a.shape != b.shape:
        raise DimensionMismatch(f"cannot add {a.shape} and {b.shape}")
    return DenseTile(a.values + b.values)


def multiply_bytes(a: Tile, b: Tile, c_bytes: int) -> int:
    """Bytes touched by one local multiply: both operands plus the output."""
    return a.nbytes + b.nbytes + c_bytes
