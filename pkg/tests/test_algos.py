from collections import Counter

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from rdmasparse.algos import (VARIANTS, GridError, MultiplyPlan, PlanError, multiply, random_delays,
                              result_checksum, serial_reference, slow_rank)
from rdmasparse.distmat import ProcGrid
from rdmasparse.gen_io import random_csr, random_dense, uniform_tiles
from rdmasparse.kernels import CsrTile, spgemm_local

PLANS = [MultiplyPlan(v) for v in VARIANTS] + [MultiplyPlan("ws_locality", base="stationary_c")]
NONSUMMA = [p for p in PLANS if p.variant != "summa_bsp"]


def dense_result(report):
    r = report.result
    return (r.to_dense() if isinstance(r, CsrTile) else r).astype(np.float64)


def triple_loop(a, b):
    a, b = a.to_dense(), (b.to_dense() if isinstance(b, CsrTile) else b)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for x in range(a.shape[1]):
            if a[i, x]:
                for j in range(b.shape[1]):
                    out[i, j] += float(a[i, x]) * float(b[x, j])
    return out


def test_serial_reference_is_the_triple_loop():
    a, b = random_csr(9, 7, 0.4, seed=1), random_dense(7, 5, seed=2)
    assert np.array_equal(serial_reference(a, b), triple_loop(a, b))
    bs = random_csr(7, 6, 0.4, seed=3)
    assert np.array_equal(serial_reference(a, bs), triple_loop(a, bs))


# -- plan validation ---------------------------------------------------------

def test_plan_validation():
    with pytest.raises(PlanError):
        MultiplyPlan("cannon")
    with pytest.raises(PlanError):
        MultiplyPlan("ws_random", base="stationary_c")
    with pytest.raises(PlanError):
        MultiplyPlan("stationary_c", base="stationary_a")
    with pytest.raises(PlanError):
        MultiplyPlan("ws_random", steal_order="spiral")
    assert MultiplyPlan("ws_locality").base == "stationary_a"
    assert MultiplyPlan("ws_random").name == "ws_random[stationary_a]"


def test_summa_requires_square_grid():
    with pytest.raises(GridError):
        multiply(random_csr(6, 6, 0.5), random_dense(6, 2), "summa_bsp", nranks=2)
    with pytest.raises(GridError):
        multiply(random_csr(6, 6, 0.5), random_dense(6, 2), "summa_bsp", grid=ProcGrid(1, 3))


def test_dimension_mismatch():
    with pytest.raises(PlanError):
        multiply(random_csr(6, 5, 0.5), random_dense(6, 2), "stationary_c", nranks=1)


# -- correctness --------------------------------------------------------------

@pytest.mark.parametrize("plan", PLANS, ids=lambda p: p.name)
@pytest.mark.parametrize("kind", ["spmm", "spgemm"])
@pytest.mark.parametrize("p", [1, 4, 16])
def test_matches_oracle(plan, kind, p):
    a = random_csr(20, 16, 0.3, seed=p)
    b = random_dense(16, 6, seed=p) if kind == "spmm" else random_csr(16, 12, 0.3, seed=p + 1)
    rep = multiply(a, b, plan, nranks=p, mode="virtual")
    assert rep.kind == kind
    assert np.array_equal(dense_result(rep), serial_reference(a, b))


@pytest.mark.parametrize("plan", NONSUMMA, ids=lambda p: p.name)
@pytest.mark.parametrize("kind", ["spmm", "spgemm"])
def test_nonsquare_grid(plan, kind):
    a = random_csr(14, 15, 0.3, seed=8)
    b = random_dense(15, 5, seed=8) if kind == "spmm" else random_csr(15, 9, 0.3, seed=9)
    rep = multiply(a, b, plan, grid=ProcGrid(2, 3), mode="virtual")
    assert np.array_equal(dense_result(rep), serial_reference(a, b))


@pytest.mark.parametrize("plan", PLANS, ids=lambda p: p.name)
def test_summa_like_tiny_example(plan):
    a = random_csr(4, 4, 0.6, seed=3)
    b = random_dense(4, 4, seed=4)
    rep = multiply(a, b, plan, nranks=4, tiles=(2, 2, 2))
    assert np.array_equal(dense_result(rep), triple_loop(a, b))


@pytest.mark.parametrize("plan", PLANS, ids=lambda p: p.name)
def test_identity_operands(plan):
    a = random_csr(12, 12, 0.4, seed=5)
    eye = CsrTile.from_dense(np.eye(12, dtype=np.float32))
    b = random_dense(12, 3, seed=6)
    assert np.array_equal(dense_result(multiply(eye, b, plan, nranks=4)), b)
    assert np.array_equal(dense_result(multiply(a, eye, plan, nranks=4)), a.to_dense())


@pytest.mark.parametrize("plan", PLANS, ids=lambda p: p.name)
def test_accumulates_into_initial_c(plan):
    a, b = random_csr(10, 10, 0.4, seed=1), random_dense(10, 4, seed=2)
    c0 = random_dense(10, 4, seed=3)
    rep = multiply(a, b, plan, nranks=4, c_init=c0)
    assert np.array_equal(dense_result(rep), serial_reference(a, b, c0))
    bs, cs = random_csr(10, 8, 0.4, seed=4), random_csr(10, 8, 0.3, seed=5)
    rep = multiply(a, bs, plan, nranks=4, c_init=cs)
    assert np.array_equal(dense_result(rep), serial_reference(a, bs, cs))


def test_single_rank_equals_sequential_local_multiplies():
    a, b = random_csr(12, 12, 0.4, seed=2), random_csr(12, 12, 0.4, seed=3)
    rep = multiply(a, b, "stationary_c", nranks=1, tiles=(12, 4, 12))
    assert [t for t in rep.executed_triples()] == [(0, 0, 0), (0, 0, 1), (0, 0, 2)]
    acc = np.zeros((12, 12))
    for k in range(3):
        acc += spgemm_local(a.submatrix(0, 12, 4 * k, 4 * k + 4), b.submatrix(4 * k, 4 * k + 4, 0, 12))[0].to_dense()
    assert np.array_equal(dense_result(rep), acc)


def test_variants_agree_on_checksum():
    a, b = random_csr(24, 24, 0.2, seed=7), random_dense(24, 8, seed=7)
    sums = {p.name: multiply(a, b, p, nranks=4).checksum for p in PLANS}
    assert len(set(sums.values())) == 1
    assert result_checksum(serial_reference(a, b)) == next(iter(sums.values()))


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.sampled_from(PLANS), st.sampled_from([(1, 1), (1, 2), (2, 2), (2, 3), (3, 3)]),
       st.integers(1, 20), st.integers(1, 20), st.integers(1, 8), st.booleans(), st.integers(0, 2**16))
def test_property_any_shape_any_grid(plan, grid, m, k, n, sparse_b, seed):
    g = ProcGrid(*grid)
    if plan.variant == "summa_bsp" and not g.is_square:
        return
    a = random_csr(m, k, 0.3, seed=seed)
    b = random_csr(k, n, 0.3, seed=seed + 1) if sparse_b else random_dense(k, n, seed=seed + 1)
    rep = multiply(a, b, plan, grid=g, mode="virtual")
    assert np.array_equal(dense_result(rep), serial_reference(a, b))
    M, N = rep.ranks and (-(-m // rep.tiles[0]), -(-n // rep.tiles[2]))
    K = -(-k // rep.tiles[1])
    assert sorted(rep.executed_triples()) == sorted(
        (i, j, kk) for i in range(M) for j in range(N) for kk in range(K))


# -- structure of execution ------------------------------------------------------

def test_stationary_c_offset_requests_are_injective():
    a = uniform_tiles(32, 32, 16, 0.25, seed=0)
    rep = multiply(a, random_dense(32, 8), MultiplyPlan("stationary_c"), nranks=16, mode="virtual")
    for step in range(4):
        for name in ("A", "B"):
            reqs = [(i, j) for r in rep.ranks for (s, nm, i, j) in r.requests if s == step and nm == name]
            assert len(reqs) == 16 and len(set(reqs)) == 16


def test_stationary_c_without_offset_collides():
    a = uniform_tiles(32, 32, 16, 0.25, seed=0)
    rep = multiply(a, random_dense(32, 8), MultiplyPlan("stationary_c", offset=False), nranks=16, mode="virtual")
    reqs = [(i, j) for r in rep.ranks for (s, nm, i, j) in r.requests if s == 0 and nm == "A"]
    assert len(set(reqs)) == 4


def test_prefetch_issues_next_gets_before_multiply():
    a = random_csr(16, 16, 0.3, seed=1)
    rep = multiply(a, random_dense(16, 4), MultiplyPlan("stationary_c"), nranks=4, mode="virtual")
    ev = rep.events[0]
    compute_at = [i for i, e in enumerate(ev) if e[0] == "compute"]
    nonblocking = [i for i, e in enumerate(ev) if e[0] == "xfer" and e[4] is False]
    # the fetch for step 1 is in flight while step 0 computes
    assert any(i < compute_at[0] for i in nonblocking[4:])
    plain = multiply(a, random_dense(16, 4), MultiplyPlan("stationary_c", prefetch=False), nranks=4, mode="virtual")
    assert np.array_equal(dense_result(plain), dense_result(rep))


@pytest.mark.parametrize("variant", ["stationary_a", "stationary_b"])
def test_each_c_tile_gets_k_contributions(variant):
    a, b = random_csr(16, 16, 0.3, seed=2), random_dense(16, 8, seed=2)
    rep = multiply(a, b, variant, nranks=4, tiles=(8, 4, 4), mode="virtual")
    per_tile = Counter((i, j) for i, j, _ in rep.executed_triples())
    assert set(per_tile.values()) == {4}
    remote = sum(1 for r in rep.ranks for (i, j, k) in r.triples if ProcGrid(2, 2).owner(i, j) != r.rank)
    assert sum(r.queue_pushes for r in rep.ranks) == remote == sum(r.queue_pops for r in rep.ranks)


def test_zero_matrix_has_zero_flops():
    rep = multiply(CsrTile.empty(8, 8), random_dense(8, 3), "stationary_a", nranks=4)
    assert rep.total_flops == 0 and not dense_result(rep).any()


@pytest.mark.parametrize("plan", PLANS, ids=lambda p: p.name)
def test_flops_equal_serial_count(plan):
    a, bs = random_csr(18, 18, 0.3, seed=4), random_csr(18, 18, 0.3, seed=5)
    serial = spgemm_local(a, bs)[1].flops
    assert multiply(a, bs, plan, nranks=9).total_flops == serial
    b = random_dense(18, 5)
    assert multiply(a, b, plan, nranks=9).total_flops == 2 * a.nnz * 5


def test_stationary_c_bytes_match_tile_shapes():
    a = random_csr(16, 16, 0.3, seed=6)
    b = random_dense(16, 8)
    rep = multiply(a, b, MultiplyPlan("stationary_c"), nranks=4, mode="virtual")
    log = rep.fabric.log
    tm, tk, tn = rep.tiles
    for r in rep.ranks:
        expect = 0
        for step, name, i, j in r.requests:
            if name == "A":
                t = a.submatrix(i * tm, (i + 1) * tm, j * tk, (j + 1) * tk)
                expect += t.nnz * 8 + (tm + 1) * 4
            else:
                expect += tk * tn * 4
        got = sum(t.nbytes for t in log.select(initiator=r.rank, op="get")
                  if isinstance(t.label, tuple) and t.label[1] in ("A", "B"))
        assert got == expect


def test_virtual_runs_are_deterministic():
    a, b = random_csr(20, 20, 0.3, seed=2), random_dense(20, 4)
    for plan in PLANS:
        r1 = multiply(a, b, plan, nranks=4, mode="virtual", delay=random_delays(1, 0, 1e-6))
        r2 = multiply(a, b, plan, nranks=4, mode="virtual", delay=random_delays(1, 0, 1e-6))
        assert r1.deterministic() == r2.deterministic()
        assert [x.triples for x in r1.ranks] == [x.triples for x in r2.ranks]


# -- workstealing -----------------------------------------------------------------

def test_ws_random_single_rank_matches_stationary_a():
    a, b = random_csr(12, 12, 0.3, seed=1), random_dense(12, 3)
    ws = multiply(a, b, "ws_random", nranks=1, tiles=(4, 4, 4))
    sa = multiply(a, b, "stationary_a", nranks=1, tiles=(4, 4, 4))
    assert sorted(ws.executed_triples()) == sorted(sa.executed_triples())
    assert ws.ranks[0].steals == 0


@pytest.mark.parametrize("mode", ["threads", "virtual"])
@pytest.mark.parametrize("plan", [MultiplyPlan("ws_random"), MultiplyPlan("ws_locality"),
                                  MultiplyPlan("ws_locality", base="stationary_c")], ids=lambda p: p.name)
def test_slow_rank_work_is_taken_by_others(mode, plan):
    a, b = random_csr(32, 32, 0.3, seed=3), random_dense(32, 32)
    rep = multiply(a, b, plan, nranks=4, tiles=(8, 8, 8), mode=mode,
                   delay=slow_rank(0, 0.02 if mode == "threads" else 1e-3))
    owned = 16  # 4 x 4 x 4 triples over 4 ranks
    assert rep.ranks[0].multiplies < owned
    assert sum(r.multiplies for r in rep.ranks[1:]) > 3 * owned
    assert np.array_equal(dense_result(rep), serial_reference(a, b))


@pytest.mark.parametrize("base", ["stationary_a", "stationary_c"])
def test_locality_steals_touch_a_local_tile(base):
    a, b = random_csr(32, 32, 0.3, seed=4), random_dense(32, 8)
    rep = multiply(a, b, MultiplyPlan("ws_locality", base=base), nranks=16, mode="threads",
                   delay=random_delays(3, 0, 0.002))
    grid = ProcGrid(4, 4)
    for r in rep.ranks:
        for i, j, k in r.stolen:
            assert r.rank in (grid.owner(i, k), grid.owner(k, j), grid.owner(i, j))
    assert Counter(rep.executed_triples()) == Counter(
        (i, j, k) for i in range(4) for j in range(4) for k in range(4))


def test_shuffled_steal_order_is_still_exact():
    a, b = random_csr(24, 24, 0.3, seed=5), random_dense(24, 24)
    for v in ("ws_random", "ws_locality"):
        rep = multiply(a, b, MultiplyPlan(v, steal_order="shuffled"), nranks=9, mode="threads",
                       delay=random_delays(0, 0, 0.001))
        assert len(rep.executed_triples()) == len(set(rep.executed_triples())) == 27
        assert np.array_equal(dense_result(rep), serial_reference(a, b))


# -- asynchrony --------------------------------------------------------------------

@pytest.mark.parametrize("variant", ["stationary_c", "stationary_a"])
def test_slow_rank_does_not_delay_others_pre_drain(variant):
    a, b = uniform_tiles(32, 32, 16, 0.25, seed=2), random_dense(32, 8)
    delta = 1e-3
    base = multiply(a, b, variant, nranks=16, mode="virtual")
    slow = multiply(a, b, variant, nranks=16, mode="virtual", delay=slow_rank(5, delta))
    # others may finish earlier (less link contention) but never later
    for r0, r1 in zip(base.ranks, slow.ranks):
        if r0.rank != 5:
            assert r1.vt_work_done <= r0.vt_work_done * (1 + 1e-12)
    extra = slow.ranks[5].vt_work_done - base.ranks[5].vt_work_done
    assert extra == pytest.approx(4 * delta, rel=1e-3)
    assert slow.makespan == pytest.approx(base.makespan + 4 * delta, rel=1e-3)


def test_summa_slow_rank_delays_everyone():
    a, b = uniform_tiles(32, 32, 16, 0.25, seed=2), random_dense(32, 8)
    base = multiply(a, b, "summa_bsp", nranks=16, mode="virtual")
    slow = multiply(a, b, "summa_bsp", nranks=16, mode="virtual", delay=slow_rank(5, 1e-3))
    assert all(s.vt_work_done >= b0.vt_work_done + 3e-3 for s, b0 in zip(slow.ranks, base.ranks))
