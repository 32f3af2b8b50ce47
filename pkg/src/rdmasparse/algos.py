"""Distributed SpMM / SpGEMM over the emulated fabric.

Variants
--------
``summa_bsp``     bulk-synchronous SUMMA: per stage, fetch the needed A and B
                  tiles (emulated broadcast), multiply, barrier.
``stationary_c``  each C owner pulls A and B tiles with gets; optional prefetch
                  and ``i + j`` iteration offset; one final barrier.
``stationary_a``  each A owner pulls B tiles and pushes partial C tiles to the
                  C owners' queues (offset ``i + k``).
``stationary_b``  mirror image of stationary A (offset ``k + j``).
``ws_random``     stationary A plus a 2-D reservation grid of fetch-add
                  counters; idle ranks steal from any cell.
``ws_locality``   a 3-D reservation grid with one counter per component
                  multiply; ranks only steal triples where they own one of
                  the A, B or C tiles.

Every variant is correct for both SpMM (B, C dense) and SpGEMM (B, C sparse).
"""

from __future__ import annotations

import json
import random
import time
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .distmat import Accumulator, DistDense, DistSparse, ProcGrid
from .fabric import Fabric, GlobalPtr, RankContext, run_spmd
from .kernels import CsrTile, DenseTile, FlopMeter, spgemm_local, spmm_local
from .model import CostModel

VARIANTS = ("summa_bsp", "stationary_c", "stationary_a", "stationary_b", "ws_random", "ws_locality")
WS_BASES = {"ws_random": ("stationary_a",), "ws_locality": ("stationary_a", "stationary_c")}

DelayFn = Callable[[int, tuple[int, int, int]], float]


class PlanError(ValueError):
    pass


class GridError(PlanError):
    pass


@dataclass(frozen=True)
class MultiplyPlan:
    variant: str
    base: Optional[str] = None
    prefetch: bool = True
    offset: bool = True
    steal_order: str = "linear"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise PlanError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.variant in WS_BASES:
            base = self.base or WS_BASES[self.variant][0]
            if base not in WS_BASES[self.variant]:
                raise PlanError(f"{self.variant} cannot use base {base!r}")
            object.__setattr__(self, "base", base)
        elif self.base is not None:
            raise PlanError(f"{self.variant} takes no base variant")
        if self.steal_order not in ("linear", "shuffled"):
            raise PlanError(f"unknown steal order {self.steal_order!r}")

    @property
    def name(self) -> str:
        if self.variant in WS_BASES:
            return f"{self.variant}[{self.base}]"
        return self.variant


@dataclass
class RankStats:
    rank: int
    triples: list = field(default_factory=list)
    stolen: list = field(default_factory=list)
    steal_local: list = field(default_factory=list)
    requests: list = field(default_factory=list)
    flops: int = 0
    output_nnz: int = 0
    steal_attempts: int = 0
    queue_pushes: int = 0
    queue_pops: int = 0
    wall_start: float = 0.0
    wall_work_done: float = 0.0
    wall_end: float = 0.0
    vt_work_done: float = 0.0

    @property
    def multiplies(self) -> int:
        return len(self.triples)

    @property
    def steals(self) -> int:
        return len(self.stolen)


class _Worker:
    """Per-rank execution state shared by all variants."""

    def __init__(self, ctx: RankContext, A: DistSparse, B, C, kind: str, plan: MultiplyPlan,
                 delay: Optional[DelayFn]):
        self.ctx, self.A, self.B, self.C = ctx, A, B, C
        self.kind, self.plan, self.delay = kind, plan, delay
        self.K = A.N
        self.stats = RankStats(ctx.rank)
        self.acc = Accumulator(C, {key: self.K for key in C.my_tiles()})
        self.step = 0

    def fetch(self, mat, name: str, i: int, j: int, nb: bool = False):
        label = (self.step, name)
        self.stats.requests.append((self.step, name, i, j))
        if nb:
            return mat.async_get_tile(i, j, label)
        return mat.get_tile(i, j, label)

    def multiply(self, i: int, j: int, k: int, a, b, stolen: bool = False):
        ctx = self.ctx
        if self.delay is not None:
            ctx.delay(self.delay(ctx.rank, (i, j, k)))
        if self.kind == "spmm":
            c = DenseTile.zeros(a.rows, b.cols, self.C.dtype)
            meter = spmm_local(a, b, c)
        else:
            c, meter = spgemm_local(a, b)
        ctx.compute(meter.flops, a.nbytes + b.nbytes + c.nbytes)
        st = self.stats
        st.triples.append((i, j, k))
        st.flops += meter.flops
        st.output_nnz += meter.output_nnz if self.kind == "spgemm" else 0
        if stolen:
            st.stolen.append((i, j, k))
            st.steal_local.append(self.A.is_mine(i, k) or self.B.is_mine(k, j) or self.C.is_mine(i, j))
        self.acc.contribute(i, j, c, label=("acc", self.step))
        self.step += 1

    def poll(self) -> None:
        self.acc.poll()
        if len(self.acc.outstanding) > 64:
            self.acc.reclaim()

    def mark_work_done(self) -> None:
        self.stats.wall_work_done = time.perf_counter()
        self.stats.vt_work_done = self.ctx.fabric.clocks[self.ctx.rank].now

    def finish(self) -> RankStats:
        self.acc.finish()
        self.stats.queue_pushes = self.acc.pushes
        self.stats.queue_pops = self.acc.pops
        return self.stats


# -- variants ---------------------------------------------------------------

def _summa(w: _Worker) -> None:
    A, B, C = w.A, w.B, w.C
    mine = C.my_tiles()
    for k in range(w.K):
        w.step = k
        a_cache, b_cache = {}, {}
        for i, j in mine:
            if i not in a_cache:
                a_cache[i] = w.fetch(A, "A", i, k)
            if j not in b_cache:
                b_cache[j] = w.fetch(B, "B", k, j)
            w.multiply(i, j, k, a_cache[i], b_cache[j])
        w.ctx.barrier()
    w.mark_work_done()


def _pipelined(w: _Worker, order: list, fetch_pair) -> None:
    """Run ``order`` of (i, j, k) with optional one-ahead prefetch."""
    if not order:
        return
    if w.plan.prefetch:
        pending = fetch_pair(*order[0], nb=True)
        for idx, (i, j, k) in enumerate(order):
            a, b = (f.get() if hasattr(f, "get") else f for f in pending)
            if idx + 1 < len(order):
                w.step += 1
                pending = fetch_pair(*order[idx + 1], nb=True)
                w.step -= 1
            w.multiply(i, j, k, a, b)
            w.poll()
    else:
        for i, j, k in order:
            a, b = fetch_pair(i, j, k, nb=False)
            w.multiply(i, j, k, a, b)
            w.poll()


def _stationary_c(w: _Worker) -> None:
    A, B, C, K = w.A, w.B, w.C, w.K

    def pair(i, j, k, nb):
        return w.fetch(A, "A", i, k, nb), w.fetch(B, "B", k, j, nb)

    for i, j in C.my_tiles():
        off = (i + j) % K if w.plan.offset else 0
        _pipelined(w, [(i, j, (k_ + off) % K) for k_ in range(K)], pair)
    w.mark_work_done()


def _stationary_a(w: _Worker) -> None:
    A, B, N = w.A, w.B, w.C.N

    for i, k in A.my_tiles():
        a = A.tile_ref(i, k)

        def pair(i_, j, k_, nb, a=a):
            return a, w.fetch(B, "B", k_, j, nb)

        off = (i + k) % N if w.plan.offset else 0
        _pipelined(w, [(i, (j_ + off) % N, k) for j_ in range(N)], pair)
    w.mark_work_done()


def _stationary_b(w: _Worker) -> None:
    A, B, M = w.A, w.B, w.C.M

    for k, j in B.my_tiles():
        b = B.tile_ref(k, j)

        def pair(i, j_, k_, nb, b=b):
            return w.fetch(A, "A", i, k_, nb), b

        off = (k + j) % M if w.plan.offset else 0
        _pipelined(w, [((i_ + off) % M, j, k) for i_ in range(M)], pair)
    w.mark_work_done()


def _alloc_counters(ctx: RankContext, keys: list, per_key: int) -> dict:
    """Collectively allocate zeroed fetch-add cells; returns the global directory."""
    mine = {}
    for key in keys:
        ptr = ctx.alloc(8 * per_key)
        ctx.local(ptr, np.int64)[:] = 0
        mine[key] = ptr
    directory = {}
    for part in ctx.allgather(list(mine.items())):
        directory.update(part)
    return directory


def _steal_order(w: _Worker, candidates: list) -> list:
    if w.plan.steal_order == "shuffled":
        rng = random.Random(w.ctx.rank)
        candidates = candidates[:]
        rng.shuffle(candidates)
    return candidates


def _local_tile(mat, i, j, w: _Worker, name: str):
    return mat.tile_ref(i, j) if mat.is_mine(i, j) else w.fetch(mat, name, i, j)


def _ws_random(w: _Worker) -> None:
    ctx, A, B, N, K, M = w.ctx, w.A, w.B, w.C.N, w.K, w.A.M
    grid = _alloc_counters(ctx, A.my_tiles(), 1)

    def attempt_work(i, k, stolen):
        off = (i + k) % N if w.plan.offset else 0
        a = None
        my_j = ctx.fetch_add(grid[(i, k)], 1)
        while my_j < N:
            j = (my_j + off) % N
            if a is None:
                a = _local_tile(A, i, k, w, "A")
            b = w.fetch(B, "B", k, j)
            w.multiply(i, j, k, a, b, stolen=stolen)
            w.poll()
            my_j = ctx.fetch_add(grid[(i, k)], 1)

    for i, k in A.my_tiles():
        attempt_work(i, k, stolen=False)
    cells = M * K
    order = [((ctx.rank + idx) % cells) for idx in range(cells)]
    for cell in _steal_order(w, order):
        i, k = divmod(cell, K)
        if A.is_mine(i, k):
            continue
        w.poll()
        w.stats.steal_attempts += 1
        attempt_work(i, k, stolen=True)
    w.mark_work_done()


def _ws_locality(w: _Worker) -> None:
    ctx, A, B, C = w.ctx, w.A, w.B, w.C
    M, N, K = C.M, C.N, w.K
    base_a = w.plan.base == "stationary_a"
    # one counter per (i, j, k), stored with the base tile that owns the work
    if base_a:
        blocks = _alloc_counters(ctx, A.my_tiles(), N)

        def cell(i, j, k) -> GlobalPtr:
            return blocks[(i, k)].sub(8 * j, 8)

        def base_owner(i, j, k) -> int:
            return A.owner(i, k)
    else:
        blocks = _alloc_counters(ctx, C.my_tiles(), K)

        def cell(i, j, k) -> GlobalPtr:
            return blocks[(i, j)].sub(8 * k, 8)

        def base_owner(i, j, k) -> int:
            return C.owner(i, j)

    def execute(i, j, k, stolen):
        a = _local_tile(A, i, k, w, "A")
        b = _local_tile(B, k, j, w, "B")
        w.multiply(i, j, k, a, b, stolen=stolen)
        w.poll()

    if base_a:
        own = [(i, (j_ + ((i + k) % N if w.plan.offset else 0)) % N, k)
               for i, k in A.my_tiles() for j_ in range(N)]
    else:
        own = [(i, j, (k_ + ((i + j) % K if w.plan.offset else 0)) % K)
               for i, j in C.my_tiles() for k_ in range(K)]
    for i, j, k in own:
        if ctx.fetch_add(cell(i, j, k), 1) == 0:
            execute(i, j, k, stolen=False)

    me = ctx.rank
    candidates = [(i, j, k) for i in range(M) for j in range(N) for k in range(K)
                  if base_owner(i, j, k) != me
                  and (A.owner(i, k) == me or B.owner(k, j) == me or C.owner(i, j) == me)]
    if candidates and w.plan.steal_order == "linear":
        shift = (me * len(candidates)) // ctx.nranks
        candidates = candidates[shift:] + candidates[:shift]
    for i, j, k in _steal_order(w, candidates):
        w.poll()
        w.stats.steal_attempts += 1
        if ctx.fetch_add(cell(i, j, k), 1) == 0:
            execute(i, j, k, stolen=True)
    w.mark_work_done()


_RUNNERS = {
    "summa_bsp": _summa,
    "stationary_c": _stationary_c,
    "stationary_a": _stationary_a,
    "stationary_b": _stationary_b,
    "ws_random": _ws_random,
    "ws_locality": _ws_locality,
}


# -- driver -----------------------------------------------------------------

def _rank_main(ctx: RankContext, a: CsrTile, b, c_init, kind: str, plan: MultiplyPlan,
               grid: ProcGrid, tiles: tuple[int, int, int], delay: Optional[DelayFn], idx):
    tm, tk, tn = tiles
    m, k = a.shape
    n = b.shape[1]
    dtype = a.values.dtype
    A = DistSparse.build(ctx, a, (tm, tk), grid, idx=idx)
    if kind == "spmm":
        B = DistDense.build(ctx, (k, n), (tk, tn), grid, init=b, dtype=dtype)
        C = DistDense.build(ctx, (m, n), (tm, tn), grid, init=c_init, dtype=dtype)
    else:
        B = DistSparse.build(ctx, b, (tk, tn), grid, idx=idx)
        C = DistSparse.build(ctx, c_init, (tm, tn), grid, shape=(m, n), dtype=dtype, idx=idx)
    ctx.barrier()
    ctx.label = None
    w = _Worker(ctx, A, B, C, kind, plan, delay)
    w.stats.wall_start = time.perf_counter()
    _RUNNERS[plan.variant](w)
    stats = w.finish()
    stats.wall_end = time.perf_counter()
    return stats, C


def default_tiles(shape_a: tuple[int, int], n: int, grid: ProcGrid) -> tuple[int, int, int]:
    """One tile row per grid row, and ``pc`` tiles along the shared dimension."""
    m, k = shape_a
    return (-(-m // grid.pr), -(-k // grid.pc), -(-n // grid.pc))


def result_checksum(result) -> float:
    """Order-insensitive digest: sum over entries of value times a hash of its position."""
    if isinstance(result, CsrTile):
        rows, cols, vals = result.row_of_nnz(), result.col_idx.astype(np.int64), result.values
    else:
        rows, cols = np.nonzero(result)
        vals = result[rows, cols]
    weights = ((rows.astype(np.int64) * 1_000_003 + cols) % 997 + 1).astype(np.float64)
    return float(np.sum(weights * vals.astype(np.float64)))


@dataclass
class RunReport:
    plan: MultiplyPlan
    kind: str
    shape: tuple[int, int, int]
    grid: tuple[int, int]
    tiles: tuple[int, int, int]
    ranks: list[RankStats]
    virtual_times: list[float]
    traffic: dict
    events: list
    wall_time: float
    checksum: float
    rank_traffic: list = field(default_factory=list)
    result: Union[np.ndarray, CsrTile, None] = None
    fabric: Optional[Fabric] = None

    @property
    def nranks(self) -> int:
        return len(self.ranks)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.ranks)

    @property
    def makespan(self) -> float:
        return max(self.virtual_times)

    def executed_triples(self) -> list[tuple[int, int, int]]:
        return [t for r in self.ranks for t in r.triples]

    def flop_meter(self) -> FlopMeter:
        return FlopMeter(self.total_flops, sum(r.output_nnz for r in self.ranks),
                         sum(r.multiplies for r in self.ranks))

    @property
    def mode(self) -> str:
        return self.fabric.mode if self.fabric is not None else "threads"

    @property
    def schedule_dependent(self) -> bool:
        """True when who-did-what depends on thread interleaving."""
        return self.mode != "virtual" and self.plan.variant in WS_BASES

    def _work_fields(self) -> dict:
        return {
            "traffic_bytes": self.traffic,
            "per_rank_work": [{"rank": r.rank, "flops": r.flops, "multiplies": r.multiplies,
                               "queue_pushes": r.queue_pushes, "queue_pops": r.queue_pops,
                               "bytes_by_route": self.rank_traffic[r.rank] if self.rank_traffic else None}
                              for r in self.ranks],
        }

    def deterministic(self) -> dict:
        out = {
            "variant": self.plan.name,
            "plan": asdict(self.plan),
            "kind": self.kind,
            "shape": list(self.shape),
            "grid": list(self.grid),
            "tiles": list(self.tiles),
            "checksum": self.checksum,
            "total_flops": self.total_flops,
            "mode": self.mode,
        }
        if not self.schedule_dependent:
            out.update(self._work_fields())
        if self.mode == "virtual":
            out["virtual_times"] = self.virtual_times
            out["makespan"] = self.makespan
        return out

    def nondeterministic(self) -> dict:
        # steal counts depend on the interleaving; virtual times are only
        # deterministic under the virtual scheduler
        out = {
            "wall_time": self.wall_time,
            "per_rank": [{"rank": r.rank, "steals": r.steals, "steal_attempts": r.steal_attempts,
                          "wall_work_done": r.wall_work_done - r.wall_start,
                          "wall_end": r.wall_end - r.wall_start,
                          "vt_work_done": r.vt_work_done}
                         for r in self.ranks],
        }
        if self.schedule_dependent:
            out.update(self._work_fields())
        if self.mode != "virtual":
            out["virtual_times"] = self.virtual_times
            out["makespan"] = self.makespan
        return out

    def to_dict(self) -> dict:
        return {"deterministic": self.deterministic(), "nondeterministic": self.nondeterministic()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def multiply(a: CsrTile, b: Union[np.ndarray, CsrTile], plan: MultiplyPlan | str,
             nranks: Optional[int] = None, grid: Optional[ProcGrid] = None,
             tiles: Optional[tuple[int, int, int]] = None, c_init=None,
             delay: Optional[DelayFn] = None, mode: str = "threads",
             cost: Optional[CostModel] = None, idx_bytes: int = 4, fabric: Optional[Fabric] = None,
             **fabric_options) -> RunReport:
    """Run one distributed multiply ``C = c_init + a @ b`` and report on it.

    ``b`` dense (2-D array) selects SpMM; ``b`` sparse selects SpGEMM.
    """
    if isinstance(plan, str):
        plan = MultiplyPlan(plan)
    kind = "spgemm" if isinstance(b, CsrTile) else "spmm"
    if kind == "spmm":
        b = np.ascontiguousarray(b, dtype=a.values.dtype)
    if a.cols != b.shape[0]:
        raise PlanError(f"cannot multiply {a.shape} by {b.shape}")
    if grid is None:
        grid = ProcGrid.for_ranks(nranks or (fabric.nranks if fabric else 1))
    if nranks is not None and grid.nranks != nranks:
        raise GridError(f"grid {grid.pr}x{grid.pc} does not have {nranks} ranks")
    if plan.variant == "summa_bsp" and not grid.is_square:
        raise GridError(f"summa_bsp needs a square processor grid, got {grid.pr}x{grid.pc}")
    if tiles is None:
        tiles = default_tiles(a.shape, b.shape[1], grid)
    if fabric is None:
        fabric = Fabric(grid.nranks, cost=cost, mode=mode, **fabric_options)
    elif fabric.nranks != grid.nranks:
        raise GridError("fabric and grid disagree on the number of ranks")
    idx = np.int32 if idx_bytes == 4 else np.int64
    t0 = time.perf_counter()
    out = run_spmd(fabric, _rank_main, a, b, c_init, kind, plan, grid, tuple(tiles), delay, idx)
    wall = time.perf_counter() - t0
    stats = [s for s, _ in out]
    C = out[0][1]
    result = C.peek_global()
    rank_traffic = [{"self": 0, "intra": 0, "inter": 0} for _ in range(grid.nranks)]
    for t in fabric.log.select():
        rank_traffic[t.initiator][t.route] += t.nbytes
    return RunReport(plan=plan, kind=kind, shape=(a.rows, a.cols, b.shape[1]),
                     grid=(grid.pr, grid.pc), tiles=tuple(tiles), ranks=stats,
                     virtual_times=fabric.virtual_times(), traffic=fabric.log.totals_by_route(),
                     events=fabric.events, wall_time=wall, checksum=result_checksum(result),
                     rank_traffic=rank_traffic, result=result, fabric=fabric)


def serial_reference(a: CsrTile, b: Union[np.ndarray, CsrTile], c_init=None) -> np.ndarray:
    """Dense product in exact 64-bit arithmetic, for integer-valued inputs."""
    ad = a.to_dense().astype(np.float64)
    bd = (b.to_dense() if isinstance(b, CsrTile) else np.asarray(b)).astype(np.float64)
    out = ad @ bd
    if c_init is not None:
        out += c_init.to_dense() if isinstance(c_init, CsrTile) else np.asarray(c_init, dtype=np.float64)
    return out


def random_delays(seed: int, low: float, high: float) -> DelayFn:
    """Deterministic pseudo-random per-multiply delays in ``[low, high]`` seconds."""
    def delay(rank: int, triple: tuple[int, int, int]) -> float:
        h = zlib.crc32(repr((seed, rank, triple)).encode())
        return low + (high - low) * (h / 0xFFFFFFFF)
    return delay


def slow_rank(rank: int, seconds: float) -> DelayFn:
    def delay(r: int, triple) -> float:
        return seconds if r == rank else 0.0
    return delay


__all__ = [
    "VARIANTS", "MultiplyPlan", "RankStats", "RunReport", "PlanError", "GridError",
    "multiply", "serial_reference", "result_checksum", "random_delays", "slow_rank",
    "default_tiles",
]
