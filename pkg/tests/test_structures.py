"""Differential tests: every structure kind against the reference model."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disagg_nvm.bench.crashmatrix import matrix_topology
from disagg_nvm.bench.workload import Model, execute, value_for
from disagg_nvm.cluster import Cluster
from disagg_nvm.errors import UnsortedInput
from disagg_nvm.frontend import FrontendConfig, Mode
from disagg_nvm.recovery import check_structures, durable_content
from disagg_nvm.structures import MAP_KINDS, Kind


def _topo():
    t = matrix_topology()
    t.n_frontends = 2
    return t

MAP_OPS = st.lists(
    st.one_of(
        st.tuples(st.just("insert"), st.integers(0, 40), st.integers(1, 2**40)),
        st.tuples(st.just("delete"), st.integers(0, 40)),
        st.tuples(st.just("find"), st.integers(0, 40)),
    ),
    max_size=60,
)


def _seq_ops(push, pop):
    return st.lists(st.one_of(st.tuples(st.just(push), st.integers(1, 2**40)), st.tuples(st.just(pop))),
                    max_size=60)


def _cluster(mode, kind, param=0, **cfg):
    if mode is Mode.RCB:
        cfg.setdefault("batch_size", 8)  # the small topology's op log holds 256 slots
    c = Cluster(_topo(), seed=0)
    fe = c.frontend(0, FrontendConfig.for_mode(mode, sole_writer=True, reclaim_delay_us=5, **cfg))
    h = fe.create(0, kind, param=param)
    return c, fe, h


def _differential(kind, mode, ops, param=0):
    c, fe, h = _cluster(mode, kind, param)
    m = Model(kind)
    for op in ops:
        got = execute(fe, h, op)
        want = m.apply(op)
        if op[0] in ("find", "pop", "dequeue"):
            assert got == want, op
    fe.drain()
    c.quiesce()
    assert durable_content(c.backends, 0) == m.state()
    assert check_structures(c.backends) == []


@pytest.mark.parametrize("mode", list(Mode))
@pytest.mark.parametrize("kind", sorted(MAP_KINDS))
@settings(max_examples=12)
@given(ops=MAP_OPS)
def test_map_kinds_match_model(kind, mode, ops):
    _differential(kind, mode, ops)


@pytest.mark.parametrize("mode", list(Mode))
@settings(max_examples=15)
@given(ops=_seq_ops("push", "pop"))
def test_stack_matches_model(mode, ops):
    _differential(Kind.STACK, mode, ops)


@pytest.mark.parametrize("mode", list(Mode))
@settings(max_examples=15)
@given(ops=_seq_ops("enqueue", "dequeue"))
def test_queue_matches_model(mode, ops):
    _differential(Kind.QUEUE, mode, ops)


@settings(max_examples=15)
@given(ops=MAP_OPS)
def test_small_order_bplus_tree_splits_and_merges(ops):
    _differential(Kind.BPT, Mode.RCB, ops, param=3)
    _differential(Kind.MVBPT, Mode.R, ops, param=3)


@pytest.mark.parametrize("kind", [Kind.BST, Kind.MVBST])
@settings(max_examples=20)
@given(pre=st.lists(st.integers(0, 500), max_size=40), vec=st.sets(st.integers(0, 500), max_size=40))
def test_vector_insert_equals_sequential(kind, pre, vec):
    results = []
    for vectorised in (True, False):
        c, fe, h = (_cluster(Mode.RCB, kind, cache=False, batch_size=64) if vectorised
                    else _cluster(Mode.R, kind, cache=False))
        for k in pre:
            fe.insert(h, k, value_for(k, 0))
        kvs = [(k, value_for(k, 1)) for k in sorted(vec)]
        if vectorised:
            fe.vector_insert(h, kvs)
        else:
            for k, v in kvs:
                fe.insert(h, k, v)
        fe.drain()
        c.quiesce()
        results.append(durable_content(c.backends, 0))
    assert results[0] == results[1]


def test_vector_insert_rejects_unsorted_input():
    c, fe, h = _cluster(Mode.RCB, Kind.BST)
    with pytest.raises(UnsortedInput):
        fe.vector_insert(h, [(5, 1), (3, 1)])
    with pytest.raises(UnsortedInput):
        fe.vector_insert(h, [(3, 1), (3, 2)])


@pytest.mark.parametrize("kind", [Kind.MVBST, Kind.MVBPT])
def test_old_version_stays_readable(kind):
    c = Cluster(_topo(), seed=0)
    fe = c.frontend(0, FrontendConfig.for_mode(Mode.RC, sole_writer=True))
    h = fe.create(0, kind, n_parts=1, param=3 if kind is Kind.MVBPT else 0)
    for k in range(20):
        fe.insert(h, k, value_for(k, 0))
    fe.drain()
    reader = c.frontend(1, FrontendConfig.for_mode(Mode.R, cache=False))
    rh = reader.open(0)
    snap = reader.snapshot(rh)
    for k in range(0, 20, 2):
        fe.insert(h, k, value_for(k, 1))
    fe.delete(h, 5)
    fe.drain()
    assert [reader.find_at(rh, 0, snap, k) for k in range(20)] == [value_for(k, 0) for k in range(20)]
    new = reader.snapshot(rh)
    assert reader.find_at(rh, 0, new, 4) == value_for(4, 1)
    assert reader.find_at(rh, 0, new, 5) is None


def test_partitioned_map_spreads_over_backends():
    from disagg_nvm.cluster import Topology

    c = Cluster(Topology(n_backends=2, capacity=2 << 20, log_len=32 << 10, oplog_slots=256, n_fe_slots=2))
    fe = c.frontend(0, FrontendConfig.for_mode(Mode.RCB, sole_writer=True, batch_size=64))
    h = fe.create(0, Kind.HASH, n_parts=4)
    assert sorted(set(h.part_be)) == [0, 1]
    for k in range(200):
        fe.insert(h, k, value_for(k, 0))
    fe.drain()
    c.quiesce()
    assert durable_content(c.backends, 0) == [(k, value_for(k, 0)) for k in range(200)]
