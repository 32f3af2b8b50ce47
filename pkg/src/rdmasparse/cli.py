"""Command-line harness: ``rdmasparse {run,model,imbalance,gen}``.

Exit codes: 0 success, 2 configuration error, 3 verification failure,
4 resource exhaustion (heap or queue).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import algos, analytics, gen_io, model
from .algos import MultiplyPlan, PlanError, multiply, random_delays, serial_reference
from .distmat import ProcGrid
from .fabric import DEFAULT_HEAP_BYTES, DEFAULT_NODE_SIZE, DEFAULT_QUEUE_CAPACITY, HeapExhausted, QueueFull
from .kernels import CsrTile

OUT_ENV = "RDMASPARSE_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_RESOURCE = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# -- input specs --------------------------------------------------------------

_RMAT_KEYS = {"scale": int, "ef": int, "edgefactor": int, "a": float, "b": float, "c": float,
              "d": float, "seed": int, "permute": int, "multiplicity": int}
_UNIFORM_KEYS = {"m": int, "k": int, "p": int, "d": float, "seed": int}


def parse_kv(text: str, keys: dict) -> dict:
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        name, sep, value = part.partition("=")
        if not sep or name not in keys:
            raise ConfigError(f"bad field {part!r}; expected key=value with key in {sorted(keys)}")
        try:
            out[name] = keys[name](value)
        except ValueError as e:
            raise ConfigError(f"bad value for {name}: {value!r}") from e
    return out


@dataclass
class ExperimentConfig:
    source: str
    source_args: dict = field(default_factory=dict)
    path: Optional[str] = None
    seed: int = 0

    def load(self) -> CsrTile:
        try:
            if self.source == "rmat":
                kv = dict(self.source_args)
                ef = kv.pop("ef", kv.pop("edgefactor", 8))
                permute = bool(kv.pop("permute", 0))
                mult = bool(kv.pop("multiplicity", 0))
                kv.setdefault("seed", self.seed)
                if any(x in kv for x in "abcd"):
                    defaults = gen_io.RmatParams()
                    for x in "abcd":
                        kv.setdefault(x, getattr(defaults, x))
                params = gen_io.RmatParams(edgefactor=ef, **kv)
                return gen_io.rmat(params, multiplicity=mult, permute=permute)
            if self.source == "uniform":
                kv = dict(self.source_args)
                kv.setdefault("seed", self.seed)
                missing = {"m", "k", "p", "d"} - kv.keys()
                if missing:
                    raise ConfigError(f"uniform input needs {sorted(missing)}")
                return gen_io.uniform_tiles(kv["m"], kv["k"], kv["p"], kv["d"], kv["seed"], values="int")
            if self.source == "mtx":
                if not self.path or not os.path.exists(self.path):
                    raise ConfigError(f"matrix file not found: {self.path}")
                return gen_io.read_matrix_market(self.path)
        except (gen_io.MatrixMarketError, ValueError) as e:
            raise ConfigError(str(e)) from e
        raise ConfigError(f"unknown input source {self.source!r}")


def _add_input(p: argparse.ArgumentParser, required: bool = True) -> None:
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--rmat", metavar="KV", help="R-MAT input, e.g. scale=10,ef=8[,permute=1]")
    g.add_argument("--mtx", metavar="PATH", help="Matrix Market file (optionally gzip)")
    g.add_argument("--uniform", metavar="KV", help="fixed per-tile density, e.g. m=64,k=64,p=16,d=0.25")
    p.add_argument("--seed", type=int, default=0)


def _input_config(args) -> ExperimentConfig:
    if args.rmat is not None:
        return ExperimentConfig("rmat", parse_kv(args.rmat, _RMAT_KEYS), seed=args.seed)
    if args.uniform is not None:
        return ExperimentConfig("uniform", parse_kv(args.uniform, _UNIFORM_KEYS), seed=args.seed)
    return ExperimentConfig("mtx", path=args.mtx, seed=args.seed)


def _add_cost(p: argparse.ArgumentParser) -> None:
    d = model.CostModel()
    p.add_argument("--net-bw", type=float, default=d.net_bw, help="bytes/s per rank")
    p.add_argument("--intra-bw", type=float, default=d.intra_bw, help="bytes/s within a node group")
    p.add_argument("--mem-bw", type=float, default=d.mem_bw, help="bytes/s")
    p.add_argument("--arith-peak", type=float, default=d.arith_peak, help="flops/s")
    p.add_argument("--latency", type=float, default=d.latency, help="seconds per transfer")
    p.add_argument("--w", type=int, default=d.w, choices=(4, 8), help="bytes per value")
    p.add_argument("--pure-network", action="store_true",
                   help="charge every transfer at --net-bw")


def _cost(args) -> model.CostModel:
    kw = dict(net_bw=args.net_bw, intra_bw=args.intra_bw, mem_bw=args.mem_bw,
              arith_peak=args.arith_peak, latency=args.latency, w=args.w)
    try:
        if args.pure_network:
            kw.pop("intra_bw")
            return model.CostModel.pure_network(**kw)
        return model.CostModel(**kw)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _parse_grid(text: Optional[str], p: int) -> ProcGrid:
    if text is None:
        return ProcGrid.for_ranks(p)
    try:
        pr, pc = (int(x) for x in text.lower().split("x"))
    except ValueError as e:
        raise ConfigError(f"grid must look like 4x4, got {text!r}") from e
    if pr < 1 or pc < 1 or pr * pc != p:
        raise ConfigError(f"grid {text} is inconsistent with --p {p}")
    return ProcGrid(pr, pc)


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV, "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not serializable: {type(x).__name__}")


def _rows_csv(header: list, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# -- subcommands --------------------------------------------------------------

def cmd_run(args) -> int:
    if args.p < 1:
        raise ConfigError("--p must be positive")
    grid = _parse_grid(args.grid, args.p)
    plan = MultiplyPlan(args.alg, base=args.base, prefetch=not args.no_prefetch,
                        offset=not args.no_offset, steal_order=args.steal_order)
    if plan.variant == "summa_bsp" and not grid.is_square:
        raise ConfigError(f"summa_bsp requires a square processor grid; --p {args.p} gives "
                          f"{grid.pr}x{grid.pc}")
    cost = _cost(args)
    a = _input_config(args).load()
    if args.kind == "spmm":
        b = gen_io.random_dense(a.cols, args.n, seed=args.seed + 1)
    else:
        b = a if a.rows == a.cols else a.transpose()
    tiles = None
    if args.tiles:
        try:
            tiles = tuple(int(x) for x in args.tiles.split(","))
        except ValueError as e:
            raise ConfigError(f"--tiles must be tm,tk,tn, got {args.tiles!r}") from e
        if len(tiles) != 3 or min(tiles) < 1:
            raise ConfigError(f"--tiles must be three positive integers, got {args.tiles!r}")
    delay = random_delays(args.seed, 0.0, args.delay_max) if args.delay_max > 0 else None
    report = multiply(a, b, plan, grid=grid, tiles=tiles, delay=delay, mode=args.mode, cost=cost,
                      idx_bytes=args.idx_bytes, heap_bytes=args.heap_bytes,
                      node_size=args.node_size, queue_capacity=args.queue_capacity,
                      seed=args.seed)

    density = a.nnz / (a.rows * a.cols) if a.rows * a.cols else 0.0
    shape = model.ProblemShape(a.rows, a.cols, b.shape[1], args.p, max(density, 1e-300), w=cost.w,
                               allow_nonsquare=True)
    measured = report.flop_meter().mean() if args.kind == "spgemm" else None
    roof = None
    if args.kind == "spmm" or (measured is not None and measured.cf):
        roof = model.roofline(shape, cost, args.kind, measured=measured, idx_bytes=args.idx_bytes)
    if args.kind == "spgemm" and grid.is_square:
        imb = analytics.stage_imbalance(a, grid.pr, b).to_dict()
    else:
        imb = {"nnz_imbalance": analytics.nnz_imbalance(a, grid.pr, grid.pc)}

    verified = None
    if args.verify:
        got = report.result.to_dense() if isinstance(report.result, CsrTile) else report.result
        verified = bool(np.array_equal(got.astype(np.float64), serial_reference(a, b)))

    det = report.deterministic()
    det["roofline"] = roof.to_dict() if roof else None
    det["imbalance"] = imb
    det["verified"] = verified
    out = _out_dir(args)
    _write(out / "run.json", _json({"deterministic": det, "nondeterministic": report.nondeterministic()}))
    rank_rows = []
    for r in report.ranks:
        traffic = report.rank_traffic[r.rank]
        rank_rows.append([r.rank, r.multiplies, r.flops, traffic["self"], traffic["intra"],
                          traffic["inter"], r.queue_pushes, r.queue_pops])
    ranks_csv = _rows_csv(["rank", "multiplies", "flops", "bytes_self", "bytes_intra", "bytes_inter",
                           "queue_pushes", "queue_pops"], rank_rows)
    timing_csv = _rows_csv(["rank", "steals", "virtual_time", "wall_end"],
                           [[r.rank, r.steals, report.virtual_times[r.rank], r.wall_end - r.wall_start]
                            for r in report.ranks])
    if report.schedule_dependent:
        _write(out / "ranks_nondeterministic.csv", ranks_csv)
    else:
        _write(out / "ranks.csv", ranks_csv)
    _write(out / "timing.csv", timing_csv)
    summary = {"variant": plan.name, "kind": args.kind, "checksum": report.checksum,
               "total_flops": report.total_flops, "makespan": report.makespan,
               "verified": verified, "out": str(out)}
    print(_json(summary), end="")
    if verified is False:
        print("verification FAILED: result differs from the serial reference", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_model(args) -> int:
    cost = _cost(args)
    try:
        shape = model.ProblemShape(args.m, args.k, args.n, args.p, args.d, w=cost.w,
                                   allow_nonsquare=args.allow_nonsquare)
        measured = None
        if args.kind == "spgemm":
            if args.flops is None or args.cf is None:
                raise ConfigError("spgemm needs --flops and --cf (measured values)")
            measured = _Measured(args.flops, args.cf)
        rep = model.roofline(shape, cost, args.kind, measured=measured, idx_bytes=args.idx_bytes)
    except model.ModelError as e:
        raise ConfigError(str(e)) from e
    out = {
        "inputs": {"m": args.m, "k": args.k, "n": args.n, "p": args.p, "d": args.d, "w": cost.w,
                   "idx_bytes": args.idx_bytes, "kind": args.kind, "cost": asdict(cost)},
        "comm_elems_per_iter": model.comm_elems_per_iter(shape),
        "comm_bytes_per_iter": model.comm_bytes_per_iter(shape, args.idx_bytes),
        "roofline": rep.to_dict(),
    }
    print(_json(out), end="")
    return EXIT_OK


@dataclass
class _Measured:
    flops: float
    cf: float


def cmd_imbalance(args) -> int:
    a = _input_config(args).load()
    if args.grid < 1:
        raise ConfigError("--grid must be positive")
    rep = analytics.stage_imbalance(a, args.grid, schedule=args.schedule)
    d = rep.to_dict()
    summary = {k: d[k] for k in ("nnz_imbalance", "per_stage_flop_imbalance",
                                 "end_to_end_flop_imbalance", "schedule")}
    if args.out or os.environ.get(OUT_ENV):
        out = _out_dir(args)
        _write(out / "imbalance.json", _json(d))
        _write(out / "stage_flops.csv", rep.stage_csv())
        _write(out / "tile_nnz.csv", rep.tile_csv())
        summary["out"] = str(out)
    print(_json(summary), end="")
    return EXIT_OK


def cmd_gen(args) -> int:
    a = _input_config(args).load()
    try:
        gen_io.write_matrix_market(a, args.output)
    except gen_io.MatrixMarketError as e:
        raise ConfigError(str(e)) from e
    print(_json({"rows": a.rows, "cols": a.cols, "nnz": a.nnz, "path": args.output}), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdmasparse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one distributed multiply")
    _add_input(run)
    run.add_argument("--alg", required=True, choices=algos.VARIANTS)
    run.add_argument("--base", choices=("stationary_a", "stationary_c"),
                     help="base variant for ws_locality")
    run.add_argument("--kind", choices=("spmm", "spgemm"), default="spmm")
    run.add_argument("--n", type=int, default=32, help="dense columns for spmm")
    run.add_argument("--p", type=int, default=4, help="number of ranks")
    run.add_argument("--grid", help="processor grid PRxPC (default: most nearly square)")
    run.add_argument("--tiles", help="tile dims tm,tk,tn (default: one tile row per grid row)")
    run.add_argument("--mode", choices=("virtual", "threads"), default="virtual")
    run.add_argument("--no-prefetch", action="store_true")
    run.add_argument("--no-offset", action="store_true")
    run.add_argument("--steal-order", choices=("linear", "shuffled"), default="linear")
    run.add_argument("--delay-max", type=float, default=0.0, help="random per-multiply delay (s)")
    run.add_argument("--idx-bytes", type=int, choices=(4, 8), default=4)
    run.add_argument("--heap-bytes", type=int, default=DEFAULT_HEAP_BYTES)
    run.add_argument("--queue-capacity", type=int, default=DEFAULT_QUEUE_CAPACITY)
    run.add_argument("--node-size", type=int, default=DEFAULT_NODE_SIZE)
    run.add_argument("--verify", action="store_true", help="compare with the serial reference")
    run.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")
    _add_cost(run)
    run.set_defaults(func=cmd_run)

    mdl = sub.add_parser("model", help="evaluate the communication and roofline model")
    for name in ("m", "k", "n", "p"):
        mdl.add_argument(f"--{name}", type=int, required=True)
    mdl.add_argument("--d", type=float, required=True, help="density of the sparse operand(s)")
    mdl.add_argument("--kind", choices=("spmm", "spgemm"), default="spmm")
    mdl.add_argument("--flops", type=float, help="measured flops per component multiply (spgemm)")
    mdl.add_argument("--cf", type=float, help="measured compression factor (spgemm)")
    mdl.add_argument("--idx-bytes", type=int, choices=(4, 8), default=4)
    mdl.add_argument("--allow-nonsquare", action="store_true", help="accept p that is not a square")
    _add_cost(mdl)
    mdl.set_defaults(func=cmd_model)

    imb = sub.add_parser("imbalance", help="nonzero and per-stage flop imbalance")
    _add_input(imb)
    imb.add_argument("--grid", type=int, default=16, help="g for a g x g grid")
    imb.add_argument("--schedule", choices=analytics.SCHEDULES, default="offset")
    imb.add_argument("--out", help=f"write JSON/CSV here (default ${OUT_ENV} if set)")
    imb.set_defaults(func=cmd_imbalance)

    gen = sub.add_parser("gen", help="generate a matrix and write it as Matrix Market")
    _add_input(gen)
    gen.add_argument("--output", "-o", required=True)
    gen.set_defaults(func=cmd_gen)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, PlanError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (HeapExhausted, QueueFull, MemoryError) as e:
        print(f"resource exhausted: {e}", file=sys.stderr)
        return EXIT_RESOURCE


if __name__ == "__main__":
    sys.exit(main())
