"""Distributed sparse matrix multiplication over an emulated one-sided fabric."""

from .algos import (VARIANTS, GridError, MultiplyPlan, PlanError, RankStats, RunReport,
                    multiply, random_delays, result_checksum, serial_reference, slow_rank)
from .distmat import Accumulator, DistDense, DistSparse, ProcGrid
from .fabric import Fabric, FabricError, GlobalPtr, RankContext, TrafficLog, run_spmd
from .kernels import CsrTile, DenseTile, FlopMeter, spgemm_local, spmm_local
from .model import CostModel, ProblemShape, RooflineReport, roofline

__all__ = [
    "VARIANTS", "GridError", "MultiplyPlan", "PlanError", "RankStats", "RunReport", "multiply",
    "random_delays", "result_checksum", "serial_reference", "slow_rank",
    "Accumulator", "DistDense", "DistSparse", "ProcGrid",
    "Fabric", "FabricError", "GlobalPtr", "RankContext", "TrafficLog", "run_spmd",
    "CsrTile", "DenseTile", "FlopMeter", "spgemm_local", "spmm_local",
    "CostModel", "ProblemShape", "RooflineReport", "roofline",
]

__version__ = "0.1.0"
