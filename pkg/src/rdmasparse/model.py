"""Communication-volume and inter-node roofline model for 2D tiled SpMM/SpGEMM.

All shapes assume a ``sqrt(p) x sqrt(p)`` tile grid with uniform tiles.  Element
counts are in words; byte conversions multiply by the word size ``w`` (and, for
the extended accounting, by a separate index width).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional


class ModelError(ValueError):
    """Invalid input to a model formula."""


@dataclass(frozen=True)
class CostModel:
    """Machine parameters used both by the roofline and by the virtual clock.

    Bandwidths are bytes/s, ``arith_peak`` is flops/s.  ``self_bw`` applies to
    transfers whose source and destination rank coincide; ``None`` means the
    local memory bandwidth.  Any bandwidth may be ``math.inf``.
    """

    net_bw: float = 3.83e9
    intra_bw: float = 50e9
    mem_bw: float = 900e9
    arith_peak: float = 16e12
    w: int = 4
    latency: float = 0.0
    self_bw: Optional[float] = None

    def __post_init__(self):
        for name in ("net_bw", "intra_bw", "mem_bw", "arith_peak"):
            if not getattr(self, name) > 0:
                raise ModelError(f"{name} must be positive, got {getattr(self, name)}")
        if self.self_bw is not None and not self.self_bw > 0:
            raise ModelError(f"self_bw must be positive, got {self.self_bw}")
        if self.latency < 0:
            raise ModelError("latency must be nonnegative")
        if self.w not in (4, 8):
            raise ModelError(f"word size must be 4 or 8, got {self.w}")

    @classmethod
    def summit(cls, **overrides) -> "CostModel":
        # V100 share of Summit injection bandwidth, NVLink, HBM2, fp32 peak
        params = dict(net_bw=3.83e9, intra_bw=50e9, mem_bw=900e9, arith_peak=16e12)
        params.update(overrides)
        return cls(**params)

    @classmethod
    def pure_network(cls, **overrides) -> "CostModel":
        """Every transfer, including self copies, is charged at ``net_bw``."""
        base = cls(**overrides)
        return cls(**{**asdict(base), "intra_bw": base.net_bw, "self_bw": base.net_bw})

    def bandwidth(self, route: str) -> float:
        if route == "inter":
            return self.net_bw
        if route == "intra":
            return self.intra_bw
        if route == "self":
            return self.mem_bw if self.self_bw is None else self.self_bw
        raise ModelError(f"unknown route {route!r}")

    def transfer_time(self, nbytes: int, route: str) -> float:
        bw = self.bandwidth(route)
        return self.latency + (0.0 if math.isinf(bw) else nbytes / bw)

    def compute_time(self, flops: float, nbytes: float) -> float:
        # local roofline: a multiply is limited by the arithmetic peak or by
        # streaming its operands through memory
        t_flop = 0.0 if math.isinf(self.arith_peak) else flops / self.arith_peak
        t_mem = 0.0 if math.isinf(self.mem_bw) else nbytes / self.mem_bw
        return max(t_flop, t_mem)


@dataclass(frozen=True)
class ProblemShape:
    """Global dims of ``C(m x n) = A(m x k) B(k x n)`` spread over ``p`` ranks.

    ``d`` is the density of the sparse operand(s).  The formulas assume a square
    rank grid; set ``allow_nonsquare`` to evaluate them with a fractional
    ``sqrt(p)`` (useful for machine sizes such as 24 GPUs).
    """

    m: float
    k: float
    n: float
    p: int
    d: float
    w: int = 4
    allow_nonsquare: bool = False

    def __post_init__(self):
        if self.p < 1:
            raise ModelError("p must be >= 1")
        if not (0 < self.d <= 1):
            raise ModelError(f"density must be in (0, 1], got {self.d}")
        if min(self.m, self.k, self.n) <= 0:
            raise ModelError("matrix dims must be positive")
        if self.w not in (4, 8):
            raise ModelError(f"word size must be 4 or 8, got {self.w}")
        if not self.allow_nonsquare and math.isqrt(self.p) ** 2 != self.p:
            raise ModelError(f"p={self.p} is not a perfect square")

    @property
    def root_p(self) -> float:
        r = math.isqrt(self.p)
        return float(r) if r * r == self.p else math.sqrt(self.p)


# Shared denominator terms.  Both arithmetic intensities are built from these so
# the communication formula appears verbatim inside them.

def sparse_a_tile_elems(s: ProblemShape) -> float:
    """Values + column indices + row pointer of one CSR tile of A."""
    return 2 * s.d * s.m * s.k / s.p + s.m / s.root_p + 1


def dense_b_tile_elems(s: ProblemShape) -> float:
    return s.k * s.n / s.p


def dense_c_tile_elems(s: ProblemShape) -> float:
    return s.m * s.n / s.p


def sparse_b_tile_elems(s: ProblemShape) -> float:
    return 2 * s.d * s.k * s.n / s.p + s.k / s.root_p + 1


def comm_elems_per_iter(s: ProblemShape) -> float:
    """Words received by one rank per stationary-C SpMM iteration."""
    return dense_b_tile_elems(s) + sparse_a_tile_elems(s)


def comm_bytes_per_iter(s: ProblemShape, idx_bytes: int = 4) -> float:
    """Byte count with values at ``w`` bytes and CSR indices at ``idx_bytes``.

    Coincides with ``w * comm_elems_per_iter(s)`` exactly when ``idx_bytes == w``.
    """
    nnz = s.d * s.m * s.k / s.p
    values = s.w * (dense_b_tile_elems(s) + nnz)
    indices = idx_bytes * (nnz + s.m / s.root_p + 1)
    return values + indices


def spmm_flops_per_iter(s: ProblemShape) -> float:
    return 2 * (s.d * s.m * s.k / s.p) * (s.n / s.root_p)


def spmm_local_ai(s: ProblemShape) -> float:
    denom = s.w * (sparse_a_tile_elems(s) + dense_c_tile_elems(s) + dense_b_tile_elems(s))
    return spmm_flops_per_iter(s) / denom


def spmm_internode_ai(s: ProblemShape) -> float:
    return spmm_flops_per_iter(s) / (s.w * comm_elems_per_iter(s))


def spgemm_local_ai(cf: float, b: float) -> float:
    """Local SpGEMM intensity from the compression factor and bytes per nonzero."""
    if not cf > 0 or not b > 0:
        raise ModelError(f"cf and b must be positive, got cf={cf}, b={b}")
    return cf / ((3 + 2 * cf) * b)


def spgemm_internode_ai(flops: float, s: ProblemShape) -> float:
    if not flops > 0:
        raise ModelError(f"flops must be positive, got {flops}")
    return flops / (s.w * (sparse_a_tile_elems(s) + sparse_b_tile_elems(s)))


@dataclass(frozen=True)
class RooflineReport:
    local_ai: float
    internode_ai: float
    local_peak: float
    internode_bound: float
    bound_kind: str

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def roofline(s: ProblemShape, cost: CostModel, kind: str = "spmm",
             measured=None, idx_bytes: int = 4) -> RooflineReport:
    """Evaluate the local and inter-node roofline for one iteration.

    For ``kind="spgemm"`` a measured flop meter (average per component
    multiply, with ``flops`` and ``cf``) is required; SpGEMM flops cannot be
    derived from the shape alone.
    """
    if kind == "spmm":
        local_ai = spmm_local_ai(s)
        internode_ai = spmm_internode_ai(s)
    elif kind == "spgemm":
        if measured is None:
            raise ModelError("spgemm roofline needs measured flops and cf")
        local_ai = spgemm_local_ai(float(measured.cf), s.w + idx_bytes)
        internode_ai = spgemm_internode_ai(float(measured.flops), s)
    else:
        raise ModelError(f"unknown kind {kind!r}")
    local_peak = min(cost.arith_peak, local_ai * cost.mem_bw)
    net_roof = internode_ai * cost.net_bw
    internode_bound = min(local_peak, net_roof)
    bound_kind = "network-bound" if net_roof < local_peak else "compute-bound"
    return RooflineReport(local_ai, internode_ai, local_peak, internode_bound, bound_kind)
