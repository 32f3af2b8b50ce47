"""Per-rank virtual clocks and event-log replay.

Each rank owns a clock and a NIC.  Transfers are serialized on the issuing
rank's NIC but overlap with computation; a blocking transfer is a non-blocking
one followed immediately by a wait.  Queue entries become visible to the owner
at the producer's clock when the push completes.

Event tuples recorded by the fabric:

    ("xfer", handle, nbytes, route, blocking)
    ("wait", handle)
    ("compute", flops, nbytes)
    ("delay", seconds)
    ("publish", entry)          # push completed; entry visible from now on
    ("pop", entry)
    ("barrier", generation)
"""

from __future__ import annotations

from .model import CostModel


class RankClock:
    __slots__ = ("cost", "now", "nic_free", "pending", "compute_time", "comm_bytes")

    def __init__(self, cost: CostModel):
        self.cost = cost
        self.now = 0.0
        self.nic_free = 0.0
        self.pending: dict[int, float] = {}
        self.compute_time = 0.0
        self.comm_bytes = 0

    def transfer(self, handle: int, nbytes: int, route: str, blocking: bool) -> float:
        start = max(self.now, self.nic_free)
        done = start + self.cost.transfer_time(nbytes, route)
        self.nic_free = done
        self.comm_bytes += nbytes
        if blocking:
            self.now = done
        else:
            self.pending[handle] = done
        return done

    def wait(self, handle: int) -> None:
        done = self.pending.pop(handle, None)
        if done is not None and done > self.now:
            self.now = done

    def compute(self, flops: float, nbytes: float) -> None:
        dt = self.cost.compute_time(flops, nbytes)
        self.compute_time += dt
        self.now += dt

    def delay(self, seconds: float) -> None:
        self.now += seconds

    def sync_to(self, t: float) -> None:
        if t > self.now:
            self.now = t


class ReplayError(RuntimeError):
    pass


def replay(events: list[list[tuple]], cost: CostModel) -> list[float]:
    """Recompute every rank's completion time from recorded events.

    Cross-rank dependencies are queue entries (a pop waits for the matching
    publish) and barriers (all ranks leave at the latest arrival).
    """
    nranks = len(events)
    clocks = [RankClock(cost) for _ in range(nranks)]
    pos = [0] * nranks
    visible: dict[int, float] = {}
    at_barrier: dict[int, int] = {}

    while True:
        progressed = False
        for r in range(nranks):
            ev, clk = events[r], clocks[r]
            while pos[r] < len(ev) and r not in at_barrier:
                e = ev[pos[r]]
                tag = e[0]
                if tag == "xfer":
                    clk.transfer(e[1], e[2], e[3], e[4])
                elif tag == "wait":
                    clk.wait(e[1])
                elif tag == "compute":
                    clk.compute(e[1], e[2])
                elif tag == "delay":
                    clk.delay(e[1])
                elif tag == "publish":
                    visible[e[1]] = clk.now
                elif tag == "pop":
                    if e[1] not in visible:
                        break
                    clk.sync_to(visible[e[1]])
                elif tag == "barrier":
                    at_barrier[r] = e[1]
                else:
                    raise ReplayError(f"unknown event {e!r}")
                pos[r] += 1
                progressed = True
        if at_barrier and len(at_barrier) == nranks:
            gens = set(at_barrier.values())
            if len(gens) != 1:
                raise ReplayError(f"ranks disagree on barrier generation: {sorted(gens)}")
            t = max(c.now for c in clocks)
            for c in clocks:
                c.sync_to(t)
            at_barrier.clear()
            progressed = True
        if all(pos[r] == len(events[r]) for r in range(nranks)) and not at_barrier:
            return [c.now for c in clocks]
        if not progressed:
            raise ReplayError("event log has an unsatisfiable dependency")


def makespan(times: list[float]) -> float:
    return max(times) if times else 0.0
