"""In-process emulation of a one-sided communication machine.

``P`` ranks run as threads inside one process.  Each rank owns a byte heap that
every other rank can read and write with ``put``/``get``, update with remote
``fetch_add``, and a remote queue that other ranks push global pointers onto.
Every transfer is recorded in a :class:`TrafficLog` and charged to the issuing
rank's virtual clock.

Two scheduling modes are supported:

``threads``
    Ranks run freely; the OS decides interleavings.  Optional ``jitter``
    inserts random sleeps before operations to shake out races.
``virtual``
    Conservative discrete-event scheduling.  A rank may perform a fabric
    operation only while it holds the smallest virtual clock (ties broken by
    rank id), so runs are deterministic and stealing decisions follow modeled
    time rather than wall-clock time.
"""

from __future__ import annotations

import bisect
import itertools
import math
import random
import threading
import time
from collections import defaultdict
from dataclasses import dataclass
from typing import Any, Callable, Optional

import numpy as np

from .clock import RankClock
from .model import CostModel

DEFAULT_HEAP_BYTES = 64 << 20
DEFAULT_QUEUE_CAPACITY = 4096
DEFAULT_NODE_SIZE = 6
ALIGN = 8
# queue entry: rank, offset, length, checksum word
ENTRY_BYTES = 32
ATOMIC_BYTES = 8

ANY = object()


class FabricError(RuntimeError):
    pass


class HeapExhausted(FabricError):
    def __init__(self, rank: int, requested: int, remaining: int):
        super().__init__(f"rank {rank} heap exhausted: requested {requested} bytes, "
                         f"{remaining} remaining")
        self.rank = rank
        self.requested = requested
        self.remaining = remaining


class InvalidPointer(FabricError):
    pass


class LengthMismatch(FabricError):
    pass


class QueueFull(FabricError):
    pass


class NotOwner(FabricError):
    pass


class FabricAborted(FabricError):
    pass


class FabricTimeout(FabricError):
    pass


@dataclass(frozen=True)
class GlobalPtr:
    rank: int
    offset: int
    length: int

    def sub(self, start: int, length: int) -> "GlobalPtr":
        if start < 0 or length < 0 or start + length > self.length:
            raise InvalidPointer(f"sub-range [{start}, {start + length}) outside {self}")
        return GlobalPtr(self.rank, self.offset + start, length)

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.rank, self.offset, self.length)


class SharedHeap:
    """First-fit allocator over one rank's byte arena."""

    def __init__(self, rank: int, capacity: int):
        self.rank = rank
        self.capacity = capacity
        self.buf = np.zeros(capacity, dtype=np.uint8)
        self._free: list[list[int]] = [[0, capacity]] if capacity else []
        self._starts: list[int] = []
        self._sizes: dict[int, int] = {}
        self._lengths: dict[int, int] = {}

    @property
    def remaining(self) -> int:
        return sum(size for _, size in self._free)

    @property
    def live_count(self) -> int:
        return len(self._starts)

    def alloc(self, nbytes: int) -> int:
        if nbytes < 0:
            raise ValueError("allocation size must be nonnegative")
        need = max(ALIGN, -(-nbytes // ALIGN) * ALIGN)
        for idx, block in enumerate(self._free):
            off, size = block
            if size >= need:
                if size == need:
                    del self._free[idx]
                else:
                    block[0] += need
                    block[1] -= need
                bisect.insort(self._starts, off)
                self._sizes[off] = need
                self._lengths[off] = nbytes
                return off
        raise HeapExhausted(self.rank, nbytes, self.remaining)

    def free(self, offset: int) -> None:
        size = self._sizes.pop(offset, None)
        if size is None:
            raise InvalidPointer(f"rank {self.rank}: free of unallocated offset {offset}")
        del self._lengths[offset]
        self._starts.pop(bisect.bisect_left(self._starts, offset))
        idx = bisect.bisect_left(self._free, [offset, 0])
        self._free.insert(idx, [offset, size])
        # coalesce with right then left neighbour
        if idx + 1 < len(self._free) and offset + size == self._free[idx + 1][0]:
            self._free[idx][1] += self._free[idx + 1][1]
            del self._free[idx + 1]
        if idx > 0 and self._free[idx - 1][0] + self._free[idx - 1][1] == offset:
            self._free[idx - 1][1] += self._free[idx][1]
            del self._free[idx]

    def is_live(self, offset: int, length: int) -> bool:
        idx = bisect.bisect_right(self._starts, offset) - 1
        if idx < 0:
            return False
        start = self._starts[idx]
        return offset + length <= start + self._lengths[start]


@dataclass(frozen=True)
class Transfer:
    op: str          # put | get | atomic
    initiator: int
    src: int         # rank the bytes leave
    dst: int         # rank the bytes arrive at
    nbytes: int
    route: str       # self | intra | inter
    label: Any


class TrafficLog:
    """Byte-exact record of every fabric transfer."""

    def __init__(self):
        self._records: list[Transfer] = []
        self._lock = threading.Lock()

    def add(self, t: Transfer) -> None:
        with self._lock:
            self._records.append(t)

    def __len__(self) -> int:
        return len(self._records)

    def select(self, op=ANY, src=ANY, dst=ANY, initiator=ANY, route=ANY,
               label=ANY) -> list[Transfer]:
        def ok(value, want):
            return want is ANY or value == want
        return [t for t in self._records
                if ok(t.op, op) and ok(t.src, src) and ok(t.dst, dst)
                and ok(t.initiator, initiator) and ok(t.route, route) and ok(t.label, label)]

    def bytes_put(self, src, dst, label=ANY) -> int:
        return sum(t.nbytes for t in self.select(op="put", src=src, dst=dst, label=label))

    def bytes_got(self, src, dst, label=ANY) -> int:
        """Bytes fetched from ``src``'s heap into ``dst`` by gets."""
        return sum(t.nbytes for t in self.select(op="get", src=src, dst=dst, label=label))

    def atomic_ops(self, initiator=ANY, dst=ANY) -> int:
        return len(self.select(op="atomic", initiator=initiator, dst=dst))

    def sent(self, rank, network_only: bool = False, op=ANY) -> int:
        return sum(t.nbytes for t in self.select(src=rank, op=op)
                   if not (network_only and t.route == "self"))

    def received(self, rank, network_only: bool = False, op=ANY) -> int:
        return sum(t.nbytes for t in self.select(dst=rank, op=op)
                   if not (network_only and t.route == "self"))

    def totals_by_route(self) -> dict[str, int]:
        out = {"self": 0, "intra": 0, "inter": 0}
        for t in self._records:
            out[t.route] += t.nbytes
        return out

    def labels(self) -> list:
        seen = {}
        for t in self._records:
            seen.setdefault(t.label, None)
        return list(seen)


class RemoteQueue:
    """Bounded ring of global pointers with per-slot ready flags.

    ``tail`` is advanced by a remote fetch-and-add to reserve a slot; the entry
    is then written with a put that also sets the slot's ready flag.  Only the
    owner pops, in slot order.
    """

    def __init__(self, owner: int, capacity: int):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.owner = owner
        self.capacity = capacity
        self.head = 0
        self.tail = 0
        self.slots: list[Optional[tuple[GlobalPtr, int]]] = [None] * capacity
        self.ready = [False] * capacity
        self.visible_at = [0.0] * capacity

    def __len__(self) -> int:
        return self.tail - self.head

    def head_ready(self) -> bool:
        return self.head < self.tail and self.ready[self.head % self.capacity]


class TransferHandle:
    __slots__ = ("id", "rank", "error", "waited")

    def __init__(self, hid: int, rank: int, error: Optional[Exception] = None):
        self.id = hid
        self.rank = rank
        self.error = error
        self.waited = False


def _byte_view(arr: np.ndarray) -> np.ndarray:
    if not isinstance(arr, np.ndarray):
        arr = np.asarray(arr)
    if not arr.flags.c_contiguous:
        raise ValueError("transfer buffers must be C-contiguous")
    return arr.reshape(-1).view(np.uint8)


class Fabric:
    """Shared state of an emulated ``nranks``-rank machine."""

    def __init__(self, nranks: int, heap_bytes: int = DEFAULT_HEAP_BYTES,
                 node_size: int = DEFAULT_NODE_SIZE,
                 queue_capacity: int = DEFAULT_QUEUE_CAPACITY,
                 cost: Optional[CostModel] = None, mode: str = "threads",
                 jitter: float = 0.0, seed: int = 0, timeout: float = 120.0):
        if nranks < 1:
            raise ValueError("nranks must be >= 1")
        if node_size < 1:
            raise ValueError("node_size must be >= 1")
        if mode not in ("threads", "virtual"):
            raise ValueError(f"unknown scheduling mode {mode!r}")
        self.nranks = nranks
        self.node_size = node_size
        self.mode = mode
        self.jitter = jitter
        self.timeout = timeout
        self.cost = cost if cost is not None else CostModel()
        self.heaps = [SharedHeap(r, heap_bytes) for r in range(nranks)]
        self.queues = [RemoteQueue(r, queue_capacity) for r in range(nranks)]
        self.log = TrafficLog()
        self.clocks = [RankClock(self.cost) for _ in range(nranks)]
        self.events: list[list[tuple]] = [[] for _ in range(nranks)]
        self._cond = threading.Condition(threading.RLock())
        self._state = ["run"] * nranks
        self._handle_ids = itertools.count()
        self._entry_ids = itertools.count()
        self._barrier_gen = 0
        self._barrier_arrived = 0
        self._board: dict[int, dict[int, Any]] = defaultdict(dict)
        self._aborted: Optional[BaseException] = None
        self._rngs = [random.Random(seed * 1_000_003 + r) for r in range(nranks)]

    # -- helpers ---------------------------------------------------------

    def route(self, src: int, dst: int) -> str:
        if src == dst:
            return "self"
        if src // self.node_size == dst // self.node_size:
            return "intra"
        return "inter"

    def _check_rank(self, rank: int) -> None:
        if not 0 <= rank < self.nranks:
            raise InvalidPointer(f"rank {rank} outside [0, {self.nranks})")

    def _check_ptr(self, ptr: GlobalPtr) -> None:
        self._check_rank(ptr.rank)
        if ptr.length < 0 or not self.heaps[ptr.rank].is_live(ptr.offset, ptr.length):
            raise InvalidPointer(f"dangling or out-of-range pointer {ptr}")

    def _check_abort(self) -> None:
        if self._aborted is not None:
            raise FabricAborted(f"fabric aborted: {self._aborted!r}")

    def _effective_time(self, r: int) -> float:
        state = self._state[r]
        if state == "run":
            return self.clocks[r].now
        if state == "qwait":
            q = self.queues[r]
            if q.head_ready():
                return max(self.clocks[r].now, q.visible_at[q.head % q.capacity])
        return math.inf

    def _holds_turn(self, rank: int) -> bool:
        mine = (self._effective_time(rank), rank)
        return all(mine <= (self._effective_time(r), r) for r in range(self.nranks))

    def _wait(self, predicate: Callable[[], bool], what: str) -> None:
        deadline = time.monotonic() + self.timeout
        while not predicate():
            self._check_abort()
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise FabricTimeout(f"timed out waiting for {what}")
            self._cond.wait(min(remaining, 0.5))
        self._check_abort()

    def _turn(self, rank: int) -> None:
        # caller holds the lock
        self._check_abort()
        if self.mode == "virtual":
            self._wait(lambda: self._holds_turn(rank), f"rank {rank} turn")

    def _jitter(self, rank: int) -> None:
        if self.jitter > 0 and self.mode == "threads":
            rng = self._rngs[rank]
            if rng.random() < 0.5:
                time.sleep(rng.random() * self.jitter)

    def _record(self, rank: int, op: str, src: int, dst: int, nbytes: int,
                label: Any, blocking: bool = True, handle: Optional[int] = None) -> int:
        route = self.route(src, dst)
        self.log.add(Transfer(op, rank, src, dst, nbytes, route, label))
        hid = next(self._handle_ids) if handle is None else handle
        self.events[rank].append(("xfer", hid, nbytes, route, blocking))
        self.clocks[rank].transfer(hid, nbytes, route, blocking)
        self._cond.notify_all()
        return hid

    # -- memory ----------------------------------------------------------

    def alloc(self, rank: int, nbytes: int) -> GlobalPtr:
        self._check_rank(rank)
        with self._cond:
            off = self.heaps[rank].alloc(nbytes)
        return GlobalPtr(rank, off, nbytes)

    def free(self, rank: int, ptr: GlobalPtr) -> None:
        if ptr.rank != rank:
            raise NotOwner(f"rank {rank} cannot free memory of rank {ptr.rank}")
        with self._cond:
            self.heaps[rank].free(ptr.offset)

    def local_view(self, rank: int, ptr: GlobalPtr, dtype=np.uint8) -> np.ndarray:
        """Zero-copy view of the caller's own memory; no traffic is logged."""
        if ptr.rank != rank:
            raise NotOwner(f"rank {rank} has no local access to rank {ptr.rank}")
        self._check_ptr(ptr)
        raw = self.heaps[rank].buf[ptr.offset:ptr.offset + ptr.length]
        return raw.view(dtype)

    def peek(self, ptr: GlobalPtr, dtype=np.uint8) -> np.ndarray:
        """Copy out of any heap without logging (post-run inspection only)."""
        self._check_ptr(ptr)
        with self._cond:
            return self.heaps[ptr.rank].buf[ptr.offset:ptr.offset + ptr.length].copy().view(dtype)

    # -- one-sided transfers --------------------------------------------------

    def put(self, rank: int, src: np.ndarray, dst: GlobalPtr, label: Any = None) -> None:
        data = _byte_view(src)
        if data.nbytes != dst.length:
            raise LengthMismatch(f"put of {data.nbytes} bytes into {dst}")
        self._jitter(rank)
        with self._cond:
            self._turn(rank)
            self._check_ptr(dst)
            self.heaps[dst.rank].buf[dst.offset:dst.offset + dst.length] = data
            self._record(rank, "put", rank, dst.rank, dst.length, label)

    def get(self, rank: int, src: GlobalPtr, out: Optional[np.ndarray] = None,
            label: Any = None) -> np.ndarray:
        if out is None:
            out = np.empty(src.length, dtype=np.uint8)
        data = _byte_view(out)
        if data.nbytes != src.length:
            raise LengthMismatch(f"get of {src} into {data.nbytes}-byte buffer")
        self._jitter(rank)
        with self._cond:
            self._turn(rank)
            self._check_ptr(src)
            data[:] = self.heaps[src.rank].buf[src.offset:src.offset + src.length]
            self._record(rank, "get", src.rank, rank, src.length, label)
        return out

    def get_nb(self, rank: int, src: GlobalPtr, out: np.ndarray,
               label: Any = None) -> TransferHandle:
        """Start a get; the data is only guaranteed present after :meth:`wait`."""
        self._jitter(rank)
        with self._cond:
            self._turn(rank)
            try:
                data = _byte_view(out)
                if data.nbytes != src.length:
                    raise LengthMismatch(f"get of {src} into {data.nbytes}-byte buffer")
                self._check_ptr(src)
            except FabricError as exc:
                return TransferHandle(next(self._handle_ids), rank, exc)
            data[:] = self.heaps[src.rank].buf[src.offset:src.offset + src.length]
            hid = self._record(rank, "get", src.rank, rank, src.length, label, blocking=False)
        return TransferHandle(hid, rank)

    def wait(self, rank: int, handle: TransferHandle) -> None:
        if handle.error is not None:
            raise handle.error
        if handle.waited:
            return
        with self._cond:
            handle.waited = True
            self.events[rank].append(("wait", handle.id))
            self.clocks[rank].wait(handle.id)
            self._cond.notify_all()

    def fetch_add(self, rank: int, counter: GlobalPtr, delta: int, label: Any = None) -> int:
        if counter.length != ATOMIC_BYTES or counter.offset % ATOMIC_BYTES:
            raise InvalidPointer(f"atomic target {counter} is not an aligned 8-byte cell")
        self._jitter(rank)
        with self._cond:
            self._turn(rank)
            self._check_ptr(counter)
            cell = self.heaps[counter.rank].buf[counter.offset:counter.offset + 8].view(np.int64)
            old = int(cell[0])
            cell[0] = old + delta
            self._record(rank, "atomic", rank, counter.rank, ATOMIC_BYTES, label)
        return old

    # -- remote queues -----------------------------------------------------

    def queue_push(self, rank: int, owner: int, value: GlobalPtr, label: Any = None) -> None:
        self._check_rank(owner)
        q = self.queues[owner]
        self._jitter(rank)
        with self._cond:
            self._turn(rank)
            if q.tail - q.head >= q.capacity:
                raise QueueFull(f"queue of rank {owner} is full ({q.capacity} entries)")
            slot = q.tail
            q.tail += 1
            self._record(rank, "atomic", rank, owner, ATOMIC_BYTES, label)
        # the slot is reserved but not yet ready; the owner must not pop it
        self._jitter(rank)
        with self._cond:
            self._turn(rank)
            entry = next(self._entry_ids)
            i = slot % q.capacity
            q.slots[i] = (value, entry)
            self._record(rank, "put", rank, owner, ENTRY_BYTES, label)
            q.visible_at[i] = self.clocks[rank].now
            q.ready[i] = True
            self.events[rank].append(("publish", entry))
            self._cond.notify_all()

    def _take_head(self, rank: int) -> GlobalPtr:
        q = self.queues[rank]
        i = q.head % q.capacity
        value, entry = q.slots[i]
        self.clocks[rank].sync_to(q.visible_at[i])
        q.slots[i] = None
        q.ready[i] = False
        q.head += 1
        self.events[rank].append(("pop", entry))
        self._cond.notify_all()
        return value

    def queue_pop(self, rank: int, owner: Optional[int] = None) -> Optional[GlobalPtr]:
        if owner is not None and owner != rank:
            raise NotOwner(f"rank {rank} cannot pop the queue of rank {owner}")
        q = self.queues[rank]
        with self._cond:
            self._turn(rank)
            if not q.head_ready():
                return None
            if self.mode == "virtual" and q.visible_at[q.head % q.capacity] > self.clocks[rank].now:
                return None
            return self._take_head(rank)

    def queue_wait(self, rank: int) -> GlobalPtr:
        """Block until an entry is available on the caller's queue, then pop it."""
        q = self.queues[rank]
        with self._cond:
            self._check_abort()
            self._state[rank] = "qwait"
            self._cond.notify_all()
            try:
                if self.mode == "virtual":
                    self._wait(lambda: q.head_ready() and self._holds_turn(rank),
                               f"rank {rank} queue")
                else:
                    self._wait(q.head_ready, f"rank {rank} queue")
            finally:
                self._state[rank] = "run"
            return self._take_head(rank)

    # -- collectives and bookkeeping -------------------------------------------

    def barrier(self, rank: int) -> None:
        with self._cond:
            self._check_abort()
            gen = self._barrier_gen
            self.events[rank].append(("barrier", gen))
            self._state[rank] = "barrier"
            self._barrier_arrived += 1
            if self._barrier_arrived == self.nranks:
                t = max(c.now for c in self.clocks)
                for c in self.clocks:
                    c.sync_to(t)
                self._barrier_arrived = 0
                self._barrier_gen += 1
                for r in range(self.nranks):
                    if self._state[r] == "barrier":
                        self._state[r] = "run"
                self._cond.notify_all()
            else:
                self._cond.notify_all()
                self._wait(lambda: self._barrier_gen != gen, f"barrier {gen}")

    def allgather(self, rank: int, value: Any) -> list:
        """Collective exchange of small metadata (directories); not traffic-logged."""
        with self._cond:
            key = self._barrier_gen
            self._board[key][rank] = value
        self.barrier(rank)
        with self._cond:
            board = self._board[key]
            out = [board[r] for r in range(self.nranks)]
            self._board.pop(key - 2, None)
        return out

    def compute(self, rank: int, flops: float, nbytes: float) -> None:
        with self._cond:
            self.events[rank].append(("compute", flops, nbytes))
            self.clocks[rank].compute(flops, nbytes)
            self._cond.notify_all()

    def delay(self, rank: int, seconds: float) -> None:
        """Injected slowdown: wall-clock sleep in threads mode, clock advance always."""
        if seconds <= 0:
            return
        if self.mode == "threads":
            time.sleep(seconds)
        with self._cond:
            self.events[rank].append(("delay", seconds))
            self.clocks[rank].delay(seconds)
            self._cond.notify_all()

    def finish(self, rank: int) -> None:
        with self._cond:
            self._state[rank] = "done"
            self._cond.notify_all()

    def abort(self, exc: BaseException) -> None:
        with self._cond:
            if self._aborted is None:
                self._aborted = exc
            self._cond.notify_all()

    def virtual_times(self) -> list[float]:
        return [c.now for c in self.clocks]


class RankContext:
    """One rank's handle on the fabric.  ``label`` tags subsequent transfers."""

    def __init__(self, fabric: Fabric, rank: int):
        fabric._check_rank(rank)
        self.fabric = fabric
        self.rank = rank
        self.label: Any = None

    @property
    def nranks(self) -> int:
        return self.fabric.nranks

    def _label(self, label):
        return self.label if label is None else label

    def alloc(self, nbytes: int) -> GlobalPtr:
        return self.fabric.alloc(self.rank, nbytes)

    def free(self, ptr: GlobalPtr) -> None:
        self.fabric.free(self.rank, ptr)

    def local(self, ptr: GlobalPtr, dtype=np.uint8) -> np.ndarray:
        return self.fabric.local_view(self.rank, ptr, dtype)

    def put(self, src: np.ndarray, dst: GlobalPtr, label=None) -> None:
        self.fabric.put(self.rank, src, dst, self._label(label))

    def get(self, src: GlobalPtr, out: Optional[np.ndarray] = None, label=None) -> np.ndarray:
        return self.fabric.get(self.rank, src, out, self._label(label))

    def get_nb(self, src: GlobalPtr, out: np.ndarray, label=None) -> TransferHandle:
        return self.fabric.get_nb(self.rank, src, out, self._label(label))

    def wait(self, handle: TransferHandle) -> None:
        self.fabric.wait(self.rank, handle)

    def fetch_add(self, counter: GlobalPtr, delta: int = 1, label=None) -> int:
        return self.fabric.fetch_add(self.rank, counter, delta, self._label(label))

    def queue_push(self, owner: int, value: GlobalPtr, label=None) -> None:
        self.fabric.queue_push(self.rank, owner, value, self._label(label))

    def queue_pop(self) -> Optional[GlobalPtr]:
        return self.fabric.queue_pop(self.rank)

    def queue_wait(self) -> GlobalPtr:
        return self.fabric.queue_wait(self.rank)

    def barrier(self) -> None:
        self.fabric.barrier(self.rank)

    def allgather(self, value: Any) -> list:
        return self.fabric.allgather(self.rank, value)

    def compute(self, flops: float, nbytes: float) -> None:
        self.fabric.compute(self.rank, flops, nbytes)

    def delay(self, seconds: float) -> None:
        self.fabric.delay(self.rank, seconds)


def run_spmd(fabric: Fabric, fn: Callable[..., Any], *args, **kwargs) -> list:
    """Run ``fn(ctx, *args, **kwargs)`` on every rank and return the results.

    The first exception raised by any rank aborts the fabric (unblocking the
    others) and is re-raised here.
    """
    n = fabric.nranks
    results: list[Any] = [None] * n
    errors: list[tuple[int, BaseException]] = []

    def body(r: int) -> None:
        ctx = RankContext(fabric, r)
        try:
            results[r] = fn(ctx, *args, **kwargs)
        except BaseException as exc:  # noqa: BLE001 - re-raised by the launcher
            errors.append((r, exc))
            fabric.abort(exc)
        finally:
            fabric.finish(r)

    threads = [threading.Thread(target=body, args=(r,), name=f"rank-{r}", daemon=True)
               for r in range(n)]
    for t in threads:
        t.start()
    deadline = time.monotonic() + fabric.timeout + 5.0
    for t in threads:
        t.join(max(0.0, deadline - time.monotonic()))
    if any(t.is_alive() for t in threads):
        exc = FabricTimeout("SPMD region did not finish")
        fabric.abort(exc)
        raise exc
    if errors:
        primary = [e for e in errors if not isinstance(e[1], FabricAborted)] or errors
        raise primary[0][1]
    return results
