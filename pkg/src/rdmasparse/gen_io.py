"""Matrix generators and Matrix Market I/O.

All randomness comes from numpy's Philox counter-based generator seeded with the
caller's integer seed, so a given seed yields the same matrix on every platform.
R-MAT edges consume ``scale`` uniform draws per edge, one per recursion level,
with the most significant bit chosen first.  The optional vertex relabeling
draws its permutation from a separate Philox stream seeded with
``seed + PERMUTE_SEED_OFFSET``.
"""

from __future__ import annotations

import gzip
import io
import math
import os
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import scipy.io
import scipy.sparse as sp

from .kernels import CsrTile

MAX_SCALE = 26
PERMUTE_SEED_OFFSET = 1000


class MatrixMarketError(ValueError):
    pass


def philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class RmatParams:
    a: float = 0.6
    b: float = 0.4 / 3
    c: float = 0.4 / 3
    d: float = 0.4 / 3
    scale: int = 10
    edgefactor: int = 8
    seed: int = 0

    def __post_init__(self):
        probs = (self.a, self.b, self.c, self.d)
        if any(not math.isfinite(x) or x < 0 for x in probs):
            raise ValueError(f"R-MAT probabilities must be nonnegative, got {probs}")
        if abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError(f"R-MAT probabilities sum to {sum(probs)}, not 1")
        if not 0 <= self.scale <= MAX_SCALE:
            raise ValueError(f"scale must be in [0, {MAX_SCALE}], got {self.scale}")
        if self.edgefactor < 0:
            raise ValueError("edgefactor must be nonnegative")

    @property
    def n(self) -> int:
        return 1 << self.scale


def rmat_edges(params: RmatParams) -> tuple[np.ndarray, np.ndarray]:
    """Raw sampled (row, col) pairs, duplicates included."""
    rng = philox(params.seed)
    ne = params.edgefactor * params.n
    r = np.zeros(ne, dtype=np.int64)
    c = np.zeros(ne, dtype=np.int64)
    ab, abc = params.a + params.b, params.a + params.b + params.c
    for _ in range(params.scale):
        u = rng.random(ne)
        down = u >= ab
        right = ((u >= params.a) & (u < ab)) | (u >= abc)
        r = 2 * r + down
        c = 2 * c + right
    return r, c


def vertex_permutation(params: RmatParams) -> np.ndarray:
    return philox(params.seed + PERMUTE_SEED_OFFSET).permutation(params.n)


def rmat(params: RmatParams, multiplicity: bool = False, permute: bool = False,
         dtype=np.float32, idx=np.int32) -> CsrTile:
    """R-MAT adjacency matrix of size ``2**scale`` squared.

    Duplicate edges collapse to 1.0, or to their count with ``multiplicity``.
    ``permute`` applies one random relabeling to rows and columns alike.
    """
    r, c = rmat_edges(params)
    if permute:
        perm = vertex_permutation(params)
        r, c = perm[r], perm[c]
    n = params.n
    if multiplicity:
        return CsrTile.from_coo(n, n, r, c, np.ones(r.size, dtype=dtype), dtype=dtype, idx=idx)
    key = np.unique(r * n + c)
    return CsrTile.from_coo(n, n, key // n, key % n, np.ones(key.size, dtype=dtype),
                            dtype=dtype, idx=idx, sum_duplicates=False)


def uniform_tiles(m: int, k: int, p: int, d: float, seed: int = 0, grid: Optional[tuple[int, int]] = None,
                  dtype=np.float32, idx=np.int32, values: str = "ones") -> CsrTile:
    """Matrix whose every tile on a ``pr x pc`` grid holds exactly ``d * area`` nonzeros.

    ``grid`` defaults to ``sqrt(p) x sqrt(p)``.  ``values`` is ``"ones"`` or
    ``"int"`` (uniform integers in 1..4).
    """
    if grid is None:
        r = math.isqrt(p)
        if r * r != p:
            raise ValueError(f"p={p} is not a perfect square; pass grid explicitly")
        grid = (r, r)
    pr, pc = grid
    if pr * pc != p:
        raise ValueError(f"grid {pr}x{pc} does not have {p} ranks")
    if m % pr or k % pc:
        raise ValueError(f"{m}x{k} does not split evenly over a {pr}x{pc} grid")
    if not 0 <= d <= 1:
        raise ValueError(f"density must be in [0, 1], got {d}")
    tr, tc = m // pr, k // pc
    per_tile = d * tr * tc
    count = round(per_tile)
    if abs(per_tile - count) > 1e-9 * max(1.0, per_tile):
        raise ValueError(f"d * tile area = {per_tile} is not an integer")
    if values not in ("ones", "int"):
        raise ValueError(f"unknown value mode {values!r}")
    rng = philox(seed)
    rows, cols = [], []
    for ti in range(pr):
        for tj in range(pc):
            cells = rng.choice(tr * tc, size=count, replace=False)
            rows.append(ti * tr + cells // tc)
            cols.append(tj * tc + cells % tc)
    r = np.concatenate(rows) if rows else np.zeros(0, np.int64)
    c = np.concatenate(cols) if cols else np.zeros(0, np.int64)
    v = np.ones(r.size) if values == "ones" else rng.integers(1, 5, size=r.size)
    return CsrTile.from_coo(m, k, r, c, v, dtype=dtype, idx=idx, sum_duplicates=False)


def random_csr(m: int, k: int, d: float, seed: int = 0, low: int = -3, high: int = 3,
               dtype=np.float32, idx=np.int32) -> CsrTile:
    """Bernoulli(d) pattern with nonzero integer values in ``[low, high]``."""
    rng = philox(seed)
    mask = rng.random((m, k)) < d
    choices = np.array([v for v in range(low, high + 1) if v != 0])
    vals = rng.choice(choices, size=(m, k)) if choices.size else np.ones((m, k))
    return CsrTile.from_dense(np.where(mask, vals, 0).astype(dtype), idx=idx)


def random_dense(k: int, n: int, seed: int = 0, low: int = -3, high: int = 3, dtype=np.float32) -> np.ndarray:
    return philox(seed).integers(low, high + 1, size=(k, n)).astype(dtype)


def read_matrix_market(path: Union[str, os.PathLike], dtype=np.float32, idx=np.int32) -> CsrTile:
    """Read a coordinate Matrix Market file (optionally gzip-compressed)."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise MatrixMarketError(f"cannot read {path}: {e}") from e
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise MatrixMarketError(f"{path}: corrupt gzip stream: {e}") from e
    try:
        m = scipy.io.mmread(io.BytesIO(raw))
    except (ValueError, IndexError, OSError) as e:
        raise MatrixMarketError(f"{path}: {e}") from e
    if not sp.issparse(m):
        m = sp.csr_matrix(m)
    return CsrTile.from_scipy(m, dtype=dtype, idx=idx)


def write_matrix_market(m: CsrTile, path: Union[str, os.PathLike], field: Optional[str] = None) -> None:
    """Write ``m`` as a general coordinate file; ``field`` defaults from the dtype."""
    if field is None:
        vals = m.values
        field = "integer" if vals.size and np.all(vals == np.round(vals)) else "real"
    try:
        scipy.io.mmwrite(str(path), m.to_scipy().tocoo(), field=field, symmetry="general")
    except OSError as e:
        raise MatrixMarketError(f"cannot write {path}: {e}") from e
