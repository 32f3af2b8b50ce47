"""Load-imbalance metrics and virtual-time accounting.

Stage flop tables have one row per rank and one column per stage.  For a
``g x g`` grid with one C tile per rank, rank ``i*g + j`` owns C(i, j), and at
stage ``s`` it multiplies A(i, k) by B(k, j) where ``k = (s + i + j) mod g``
under the offset schedule, or ``k = s`` under the aligned schedule.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .clock import replay
from .kernels import CsrTile, spgemm_local

SCHEDULES = ("offset", "aligned")


def _tile_size(extent: int, parts: int) -> int:
    return max(1, -(-extent // parts))


def tile_nnz(m: CsrTile, pr: int, pc: int) -> np.ndarray:
    """Nonzeros per tile of an even ``pr x pc`` split (edge tiles may be smaller)."""
    if pr < 1 or pc < 1:
        raise ValueError(f"grid dims must be >= 1, got {pr}x{pc}")
    tr, tc = _tile_size(m.rows, pr), _tile_size(m.cols, pc)
    ti = m.row_of_nnz() // tr
    tj = m.col_idx.astype(np.int64) // tc
    return np.bincount(ti * pc + tj, minlength=pr * pc).reshape(pr, pc)


def max_over_mean(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean() if x.size else 0.0
    if mean == 0:
        warnings.warn("all loads are zero; imbalance defined as 1.0", RuntimeWarning, stacklevel=2)
        return 1.0
    return float(x.max() / mean)


def nnz_imbalance(m: CsrTile, pr: int, pc: Optional[int] = None) -> float:
    """max / mean of per-tile nonzero counts."""
    return max_over_mean(tile_nnz(m, pr, pc if pc is not None else pr))


def _block_counts(rows: np.ndarray, cols: np.ndarray, extent: int, tile: int, g: int) -> np.ndarray:
    # out[x, b] = number of entries on line x whose other coordinate falls in block b
    return np.bincount(rows * g + cols // tile, minlength=extent * g).reshape(extent, g)


def flop_tensor(a: CsrTile, b: CsrTile, g: int) -> np.ndarray:
    """F[i, j, k] = flops of A(i, k) @ B(k, j) on a g x g x g tiling, counted symbolically.

    Each stored A entry in column x pairs with every stored B entry in row x,
    so F[i, j, k] = 2 * sum over x in block k of colcount_A[x, i] * rowcount_B[x, j].
    """
    if a.cols != b.rows:
        raise ValueError(f"cannot multiply {a.shape} by {b.shape}")
    tm, tk, tn = _tile_size(a.rows, g), _tile_size(a.cols, g), _tile_size(b.cols, g)
    col_a = _block_counts(a.col_idx.astype(np.int64), a.row_of_nnz(), a.cols, tm, g)
    row_b = _block_counts(b.row_of_nnz(), b.col_idx.astype(np.int64), b.rows, tn, g)
    F = np.zeros((g, g, g), dtype=np.int64)
    for k in range(g):
        sl = slice(k * tk, min((k + 1) * tk, a.cols))
        F[:, :, k] = 2 * (col_a[sl].T @ row_b[sl])
    return F


def measured_flop_tensor(a: CsrTile, b: CsrTile, g: int) -> np.ndarray:
    """Same as :func:`flop_tensor` but by running every tile multiply."""
    tm, tk, tn = _tile_size(a.rows, g), _tile_size(a.cols, g), _tile_size(b.cols, g)

    def bounds(t, size, extent):
        return min(t * size, extent), min((t + 1) * size, extent)

    F = np.zeros((g, g, g), dtype=np.int64)
    for i in range(g):
        for k in range(g):
            ai = a.submatrix(*bounds(i, tm, a.rows), *bounds(k, tk, a.cols))
            for j in range(g):
                bk = b.submatrix(*bounds(k, tk, b.rows), *bounds(j, tn, b.cols))
                F[i, j, k] = spgemm_local(ai, bk)[1].flops
    return F


def stage_table(F: np.ndarray, schedule: str = "offset") -> np.ndarray:
    """Rank x stage flop table from a g x g x g flop tensor."""
    if schedule not in SCHEDULES:
        raise ValueError(f"unknown schedule {schedule!r}")
    g = F.shape[0]
    if schedule == "offset":
        ar = np.arange(g)
        k = (ar[None, None, :] + ar[:, None, None] + ar[None, :, None]) % g
        F = np.take_along_axis(F, k, axis=2)
    return F.reshape(g * g, g)


def imbalance_from_table(table) -> tuple[float, float]:
    """(end_to_end, per_stage) for a rank x stage table."""
    t = np.asarray(table, dtype=np.float64)
    if t.ndim != 2:
        raise ValueError("stage table must be 2-D (ranks x stages)")
    end_to_end = max_over_mean(t.sum(axis=1))
    avg = t.mean(axis=0).sum()
    per_stage = float(t.max(axis=0).sum() / avg) if avg else 1.0
    return end_to_end, per_stage


@dataclass
class ImbalanceReport:
    per_tile_nnz: np.ndarray
    nnz_imbalance: float
    per_stage: float
    end_to_end: float
    stage_flops: np.ndarray
    schedule: str = "offset"

    def to_dict(self) -> dict:
        return {
            "nnz_imbalance": self.nnz_imbalance,
            "per_stage_flop_imbalance": self.per_stage,
            "end_to_end_flop_imbalance": self.end_to_end,
            "schedule": self.schedule,
            "per_tile_nnz": self.per_tile_nnz.tolist(),
            "stage_flops": self.stage_flops.tolist(),
        }

    def stage_csv(self) -> str:
        """Columns: rank, stage, flops."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "stage", "flops"])
        for r, row in enumerate(self.stage_flops):
            for s, f in enumerate(row):
                w.writerow([r, s, int(f)])
        return buf.getvalue()

    def tile_csv(self) -> str:
        """Columns: tile_i, tile_j, nnz."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tile_i", "tile_j", "nnz"])
        for (i, j), v in np.ndenumerate(self.per_tile_nnz):
            w.writerow([i, j, int(v)])
        return buf.getvalue()


def stage_imbalance(a: CsrTile, g: int, b: Optional[CsrTile] = None, schedule: str = "offset",
                    measured: bool = False) -> ImbalanceReport:
    """Flop imbalance of a 2-D stationary-C SpGEMM ``a @ b`` (default ``a @ a``) on a g x g grid."""
    b = a if b is None else b
    F = measured_flop_tensor(a, b, g) if measured else flop_tensor(a, b, g)
    table = stage_table(F, schedule)
    e2e, per = imbalance_from_table(table)
    tiles = tile_nnz(a, g, g)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        nnz_imb = max_over_mean(tiles)
    return ImbalanceReport(tiles, nnz_imb, per, e2e, table, schedule)


def virtual_time(report, cost) -> list[float]:
    """Per-rank completion times of a recorded run under ``cost``."""
    if cost is None:
        raise ValueError("a cost model is required")
    events = getattr(report, "events", None)
    if events is None:
        raise ValueError("report carries no event log")
    return replay(events, cost)
