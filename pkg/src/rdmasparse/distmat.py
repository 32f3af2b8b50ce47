"""Tiled distributed matrices over the fabric.

Every rank holds its own matrix handle with a private copy of the directory of
global pointers: one pointer per dense tile, three (values, row pointer, column
indices) per sparse tile.  Handles are built collectively; afterwards any rank
can fetch any tile with one-sided gets.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .fabric import GlobalPtr, NotOwner, RankContext, TransferHandle
from .kernels import CsrTile, DenseTile, Tile, csr_add, dense_add

HEADER_WORDS = 16
HEADER_BYTES = HEADER_WORDS * 8
# contribution header layout (int64 words)
H_I, H_J, H_KIND, H_ROWS, H_COLS, H_NNZ, H_CONSUMED = range(7)
H_VALS, H_RP, H_CI = 8, 10, 12  # (offset, length) pairs relative to the block


class ProtocolError(RuntimeError):
    """A distributed protocol invariant was violated."""


@dataclass(frozen=True)
class ProcGrid:
    pr: int
    pc: int

    def __post_init__(self):
        if self.pr < 1 or self.pc < 1:
            raise ValueError("processor grid dims must be >= 1")

    @property
    def nranks(self) -> int:
        return self.pr * self.pc

    @property
    def is_square(self) -> bool:
        return self.pr == self.pc

    def owner(self, i: int, j: int) -> int:
        return (i % self.pr) * self.pc + (j % self.pc)

    def coords(self, rank: int) -> tuple[int, int]:
        return divmod(rank, self.pc)

    @classmethod
    def for_ranks(cls, p: int) -> "ProcGrid":
        """Most nearly square ``pr x pc`` factorization with ``pr <= pc``."""
        pr = math.isqrt(p)
        while p % pr:
            pr -= 1
        return cls(pr, p // pr)


@dataclass(frozen=True)
class SparseEntry:
    nnz: int
    values: GlobalPtr
    row_ptr: GlobalPtr
    col_idx: GlobalPtr


class TileFuture:
    """Pending tile fetch; :meth:`get` waits on all component transfers."""

    def __init__(self, ctx: RankContext, handles: list[TransferHandle], build: Callable[[], Tile]):
        self._ctx = ctx
        self._handles = handles
        self._build = build
        self._tile: Optional[Tile] = None

    def get(self) -> Tile:
        if self._tile is None:
            for h in self._handles:
                self._ctx.wait(h)
            self._tile = self._build()
        return self._tile


class _DistBase:
    kind = ""

    def __init__(self, ctx: RankContext, shape: tuple[int, int], tile_shape: tuple[int, int],
                 grid: ProcGrid, dtype):
        if grid.nranks != ctx.nranks:
            raise ValueError(f"grid {grid.pr}x{grid.pc} does not match {ctx.nranks} ranks")
        m, n = shape
        tm, tn = tile_shape
        if m < 1 or n < 1 or tm < 1 or tn < 1:
            raise ValueError("matrix and tile dims must be positive")
        self.ctx = ctx
        self.shape = (m, n)
        self.tile_shape = (tm, tn)
        self.grid = grid
        self.dtype = np.dtype(dtype)
        self.grid_shape = (-(-m // tm), -(-n // tn))
        self._dir: dict[tuple[int, int], object] = {}

    @property
    def M(self) -> int:
        return self.grid_shape[0]

    @property
    def N(self) -> int:
        return self.grid_shape[1]

    def tile_dims(self, i: int, j: int) -> tuple[int, int]:
        self._check(i, j)
        m, n = self.shape
        tm, tn = self.tile_shape
        return (min(tm, m - i * tm), min(tn, n - j * tn))

    def tile_bounds(self, i: int, j: int) -> tuple[int, int, int, int]:
        rows, cols = self.tile_dims(i, j)
        r0, c0 = i * self.tile_shape[0], j * self.tile_shape[1]
        return r0, r0 + rows, c0, c0 + cols

    def owner(self, i: int, j: int) -> int:
        return self.grid.owner(i, j)

    def is_mine(self, i: int, j: int) -> bool:
        return self.owner(i, j) == self.ctx.rank

    def my_tiles(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.M) for j in range(self.N) if self.is_mine(i, j)]

    def _check(self, i: int, j: int) -> None:
        if not (0 <= i < self.grid_shape[0] and 0 <= j < self.grid_shape[1]):
            raise IndexError(f"tile ({i}, {j}) outside {self.grid_shape[0]}x{self.grid_shape[1]} grid")

    def _require_owner(self, i: int, j: int) -> None:
        self._check(i, j)
        if not self.is_mine(i, j):
            raise NotOwner(f"rank {self.ctx.rank} does not own tile ({i}, {j}) "
                           f"(owner {self.owner(i, j)})")

    def _publish(self, entries: dict) -> None:
        for part in self.ctx.allgather(list(entries.items())):
            self._dir.update(part)

    def entry(self, i: int, j: int):
        self._check(i, j)
        return self._dir[(i, j)]

    def get_tile(self, i: int, j: int, label=None) -> Tile:
        return self.async_get_tile(i, j, label).get()


class DistDense(_DistBase):
    kind = "dense"

    @classmethod
    def build(cls, ctx: RankContext, shape, tile_shape, grid: ProcGrid, init=None,
              dtype=np.float32) -> "DistDense":
        """Collective: allocate and fill owned tiles, then replicate the directory.

        ``init`` may be ``None`` (zeros), a scalar, a global 2-D array, or a
        callable ``(i, j, rows, cols) -> array``.
        """
        mat = cls(ctx, tuple(shape), tuple(tile_shape), grid, dtype)
        mine = {}
        for i, j in mat.my_tiles():
            rows, cols = mat.tile_dims(i, j)
            ptr = ctx.alloc(rows * cols * mat.dtype.itemsize)
            view = ctx.local(ptr, mat.dtype).reshape(rows, cols)
            if init is None:
                view[...] = 0
            elif callable(init):
                view[...] = init(i, j, rows, cols)
            elif np.ndim(init) == 0:
                view[...] = init
            else:
                r0, r1, c0, c1 = mat.tile_bounds(i, j)
                view[...] = np.asarray(init)[r0:r1, c0:c1]
            mine[(i, j)] = ptr
        mat._publish(mine)
        return mat

    def async_get_tile(self, i: int, j: int, label=None) -> TileFuture:
        ptr = self.entry(i, j)
        rows, cols = self.tile_dims(i, j)
        out = np.empty((rows, cols), dtype=self.dtype)
        h = self.ctx.get_nb(ptr, out, label)
        return TileFuture(self.ctx, [h], lambda: DenseTile(out))

    def tile_ref(self, i: int, j: int) -> DenseTile:
        self._require_owner(i, j)
        rows, cols = self.tile_dims(i, j)
        return DenseTile(self.ctx.local(self.entry(i, j), self.dtype).reshape(rows, cols))

    def tile_nbytes(self, i: int, j: int) -> int:
        rows, cols = self.tile_dims(i, j)
        return rows * cols * self.dtype.itemsize

    def gather(self) -> np.ndarray:
        """Fetch every tile through the fabric and assemble the global matrix."""
        out = np.zeros(self.shape, dtype=self.dtype)
        for i in range(self.M):
            for j in range(self.N):
                r0, r1, c0, c1 = self.tile_bounds(i, j)
                out[r0:r1, c0:c1] = self.get_tile(i, j, label="gather").values
        return out

    def peek_global(self) -> np.ndarray:
        """Assemble without logging traffic (post-run inspection)."""
        fab = self.ctx.fabric
        out = np.zeros(self.shape, dtype=self.dtype)
        for i in range(self.M):
            for j in range(self.N):
                r0, r1, c0, c1 = self.tile_bounds(i, j)
                out[r0:r1, c0:c1] = fab.peek(self.entry(i, j), self.dtype).reshape(r1 - r0, c1 - c0)
        return out


class DistSparse(_DistBase):
    kind = "sparse"

    def __init__(self, ctx, shape, tile_shape, grid, dtype, idx=np.int32):
        super().__init__(ctx, shape, tile_shape, grid, dtype)
        self.idx = np.dtype(idx)
        self._pending: dict[tuple[int, int], SparseEntry] = {}

    def _store(self, t: CsrTile) -> SparseEntry:
        ctx = self.ctx
        vals = np.ascontiguousarray(t.values, dtype=self.dtype)
        rp = np.ascontiguousarray(t.row_ptr, dtype=self.idx)
        ci = np.ascontiguousarray(t.col_idx, dtype=self.idx)
        entry = SparseEntry(t.nnz, ctx.alloc(vals.nbytes), ctx.alloc(rp.nbytes), ctx.alloc(ci.nbytes))
        for arr, ptr in ((vals, entry.values), (rp, entry.row_ptr), (ci, entry.col_idx)):
            ctx.local(ptr)[...] = arr.view(np.uint8)
        return entry

    @classmethod
    def build(cls, ctx: RankContext, source: Optional[CsrTile], tile_shape, grid: ProcGrid,
              shape=None, dtype=None, idx=np.int32) -> "DistSparse":
        """Collective scatter of a global CSR matrix (``None`` builds an empty one)."""
        if source is None:
            if shape is None:
                raise ValueError("shape is required for an empty sparse matrix")
            dtype = dtype or np.float32
        else:
            shape = source.shape
            dtype = dtype or source.values.dtype
        mat = cls(ctx, tuple(shape), tuple(tile_shape), grid, dtype, idx)
        mine = {}
        for i, j in mat.my_tiles():
            r0, r1, c0, c1 = mat.tile_bounds(i, j)
            if source is None:
                t = CsrTile.empty(r1 - r0, c1 - c0, mat.dtype, mat.idx)
            else:
                t = source.submatrix(r0, r1, c0, c1)
            mine[(i, j)] = mat._store(t)
        mat._publish(mine)
        return mat

    def tile_nnz(self, i: int, j: int) -> int:
        return self.entry(i, j).nnz

    def tile_nbytes(self, i: int, j: int) -> int:
        rows, _ = self.tile_dims(i, j)
        nnz = self.tile_nnz(i, j)
        return nnz * (self.dtype.itemsize + self.idx.itemsize) + (rows + 1) * self.idx.itemsize

    def async_get_tile(self, i: int, j: int, label=None) -> TileFuture:
        e: SparseEntry = self.entry(i, j)
        rows, cols = self.tile_dims(i, j)
        vals = np.empty(e.nnz, dtype=self.dtype)
        rp = np.empty(rows + 1, dtype=self.idx)
        ci = np.empty(e.nnz, dtype=self.idx)
        ctx = self.ctx
        handles = [ctx.get_nb(e.values, vals, label),
                   ctx.get_nb(e.row_ptr, rp, label),
                   ctx.get_nb(e.col_idx, ci, label)]
        return TileFuture(ctx, handles, lambda: CsrTile(rows, cols, rp, ci, vals))

    def tile_ref(self, i: int, j: int) -> CsrTile:
        self._require_owner(i, j)
        e: SparseEntry = self.entry(i, j)
        rows, cols = self.tile_dims(i, j)
        return CsrTile(rows, cols, self.ctx.local(e.row_ptr, self.idx),
                       self.ctx.local(e.col_idx, self.idx), self.ctx.local(e.values, self.dtype))

    def replace_tile(self, i: int, j: int, t: CsrTile) -> None:
        """Stage a new tile; other ranks see it only after :meth:`renew_tiles`."""
        self._require_owner(i, j)
        if t.shape != self.tile_dims(i, j):
            raise ValueError(f"replacement tile {t.shape} != {self.tile_dims(i, j)}")
        old = self._pending.pop((i, j), None)
        if old is not None:
            self._free_entry(old)
        self._pending[(i, j)] = self._store(t)

    def _free_entry(self, e: SparseEntry) -> None:
        for ptr in (e.values, e.row_ptr, e.col_idx):
            self.ctx.free(ptr)

    def renew_tiles(self) -> None:
        """Collective: publish staged replacements and release the old tiles."""
        staged, self._pending = self._pending, {}
        retired = [self._dir[key] for key in staged]
        self._publish(staged)
        # every rank has passed the exchange barrier, so no reader still
        # holds the retired pointers
        for e in retired:
            self._free_entry(e)

    def gather(self) -> CsrTile:
        parts_r, parts_c, parts_v = [], [], []
        for i in range(self.M):
            for j in range(self.N):
                t = self.get_tile(i, j, label="gather")
                r0, _, c0, _ = self.tile_bounds(i, j)
                parts_r.append(t.row_of_nnz() + r0)
                parts_c.append(t.col_idx.astype(np.int64) + c0)
                parts_v.append(t.values)
        return CsrTile.from_coo(self.shape[0], self.shape[1], np.concatenate(parts_r),
                                np.concatenate(parts_c), np.concatenate(parts_v),
                                dtype=self.dtype, idx=self.idx)

    def peek_global(self) -> CsrTile:
        fab = self.ctx.fabric
        parts_r, parts_c, parts_v = [], [], []
        for i in range(self.M):
            for j in range(self.N):
                e: SparseEntry = self.entry(i, j)
                r0, r1, c0, _ = self.tile_bounds(i, j)
                rp = fab.peek(e.row_ptr, self.idx)
                parts_r.append(np.repeat(np.arange(r0, r1), np.diff(rp)))
                parts_c.append(fab.peek(e.col_idx, self.idx).astype(np.int64) + c0)
                parts_v.append(fab.peek(e.values, self.dtype))
        return CsrTile.from_coo(self.shape[0], self.shape[1], np.concatenate(parts_r),
                                np.concatenate(parts_c), np.concatenate(parts_v),
                                dtype=self.dtype, idx=self.idx)


DistMatrix = Union[DistDense, DistSparse]


class Accumulator:
    """All updates to the caller's tiles of C, local or via its remote queue.

    Producers call :meth:`contribute`; a contribution for a remotely owned tile
    is written to the producer's heap and a pointer to it is pushed on the
    owner's queue.  The owner fetches and adds each one exactly once, then
    marks it consumed so the producer may free it.  ``expected`` gives the
    number of contributions each owned tile must receive in total.
    """

    def __init__(self, C: DistMatrix, expected: dict[tuple[int, int], int]):
        self.C = C
        self.ctx = C.ctx
        self.expected = dict(expected)
        self.applied: dict[tuple[int, int], int] = defaultdict(int)
        self.partial: dict[tuple[int, int], CsrTile] = {}
        self.outstanding: list[GlobalPtr] = []
        self.pushes = 0
        self.pops = 0
        if C.kind == "sparse":
            for key in C.my_tiles():
                ref = C.tile_ref(*key)
                self.partial[key] = CsrTile(ref.rows, ref.cols, ref.row_ptr.copy(),
                                            ref.col_idx.copy(), ref.values.copy())

    def complete(self) -> bool:
        return all(self.applied[key] >= n for key, n in self.expected.items())

    def _apply(self, i: int, j: int, tile: Tile) -> None:
        key = (i, j)
        if key not in self.expected:
            raise ProtocolError(f"rank {self.ctx.rank} got a contribution for tile {key} it does not own")
        self.applied[key] += 1
        if self.applied[key] > self.expected[key]:
            raise ProtocolError(f"tile {key} received {self.applied[key]} contributions, "
                                f"expected {self.expected[key]}")
        if self.C.kind == "dense":
            ref = self.C.tile_ref(i, j)
            ref.values[...] = dense_add(ref, tile).values
        else:
            self.partial[key] = csr_add(self.partial[key], tile)

    def contribute(self, i: int, j: int, tile: Tile, label=None) -> None:
        owner = self.C.owner(i, j)
        if owner == self.ctx.rank:
            self._apply(i, j, tile)
            return
        self.ctx.queue_push(owner, self._pack(i, j, tile), label)
        self.pushes += 1

    def _pack(self, i: int, j: int, tile: Tile) -> GlobalPtr:
        ctx = self.ctx
        header = np.zeros(HEADER_WORDS, dtype=np.int64)
        header[[H_I, H_J, H_ROWS, H_COLS]] = (i, j, tile.rows, tile.cols)
        if isinstance(tile, DenseTile):
            arrays = [np.ascontiguousarray(tile.values, dtype=self.C.dtype)]
            header[H_KIND] = 0
        else:
            idx = getattr(self.C, "idx", np.dtype(np.int32))
            arrays = [np.ascontiguousarray(tile.values, dtype=self.C.dtype),
                      np.ascontiguousarray(tile.row_ptr, dtype=idx),
                      np.ascontiguousarray(tile.col_idx, dtype=idx)]
            header[H_KIND] = 1
            header[H_NNZ] = tile.nnz
        offset = HEADER_BYTES
        for slot, arr in zip((H_VALS, H_RP, H_CI), arrays):
            header[slot], header[slot + 1] = offset, arr.nbytes
            offset += -(-arr.nbytes // 8) * 8
        block = ctx.alloc(offset)
        raw = ctx.local(block)
        raw[:HEADER_BYTES] = header.view(np.uint8)
        for slot, arr in zip((H_VALS, H_RP, H_CI), arrays):
            start = int(header[slot])
            raw[start:start + arr.nbytes] = arr.reshape(-1).view(np.uint8)
        self.outstanding.append(block)
        return block.sub(0, HEADER_BYTES)

    def _consume(self, hdr_ptr: GlobalPtr) -> None:
        ctx = self.ctx
        header = ctx.get(hdr_ptr, np.empty(HEADER_WORDS, dtype=np.int64), label="accumulate")
        i, j, kind, rows, cols, nnz = (int(x) for x in header[:6])

        def part(slot, dtype, count):
            src = GlobalPtr(hdr_ptr.rank, hdr_ptr.offset + int(header[slot]), int(header[slot + 1]))
            return ctx.get(src, np.empty(count, dtype=dtype), label="accumulate")

        if kind == 0:
            tile: Tile = DenseTile(part(H_VALS, self.C.dtype, rows * cols).reshape(rows, cols))
        else:
            idx = self.C.idx
            vals = part(H_VALS, self.C.dtype, nnz)
            rp = part(H_RP, idx, rows + 1)
            ci = part(H_CI, idx, nnz)
            tile = CsrTile(rows, cols, rp, ci, vals)
        self._apply(i, j, tile)
        ctx.put(np.ones(1, dtype=np.int64), hdr_ptr.sub(H_CONSUMED * 8, 8), label="accumulate")
        self.pops += 1

    def poll(self) -> int:
        """Apply whatever is already waiting on the queue."""
        n = 0
        while (ptr := self.ctx.queue_pop()) is not None:
            self._consume(ptr)
            n += 1
        return n

    def drain(self) -> None:
        """Block until every owned tile has received all expected contributions."""
        while not self.complete():
            self._consume(self.ctx.queue_wait())

    def reclaim(self) -> int:
        """Free contributions whose owners have marked them consumed."""
        keep, freed = [], 0
        for block in self.outstanding:
            if self.ctx.local(block.sub(H_CONSUMED * 8, 8), np.int64)[0]:
                self.ctx.free(block)
                freed += 1
            else:
                keep.append(block)
        self.outstanding = keep
        return freed

    def finish(self) -> None:
        """Collective: drain, write back sparse results, and release buffers."""
        self.drain()
        if self.C.kind == "sparse":
            for key, t in self.partial.items():
                self.C.replace_tile(*key, t)
            self.C.renew_tiles()
        else:
            self.ctx.barrier()
        self.reclaim()
        if self.outstanding:
            raise ProtocolError(f"rank {self.ctx.rank} has {len(self.outstanding)} unconsumed contributions")
