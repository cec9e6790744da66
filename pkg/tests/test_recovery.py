from collections import Counter

import pytest

from disagg_nvm.bench.crashmatrix import CrashPoint, dry_run, matrix_ops, matrix_topology, run_point
from disagg_nvm.bench.workload import Model, execute, value_for
from disagg_nvm.cluster import Cluster
from disagg_nvm.concurrency import lock_owner
from disagg_nvm.errors import ServiceHalted
from disagg_nvm.frontend import FrontendConfig, Mode
from disagg_nvm.recovery import (
    LeaseService,
    durable_content,
    orphan_sweep,
    promote_mirror,
    reachable_blocks,
    recover_backend,
    recover_frontend,
)
from disagg_nvm.structures import Kind


def _cluster(mode=Mode.RCB, **topo_kw):
    topo = matrix_topology()
    topo.n_frontends = 2
    for k, v in topo_kw.items():
        setattr(topo, k, v)
    c = Cluster(topo, seed=3)
    cfg = FrontendConfig.for_mode(mode, sole_writer=True, reclaim_delay_us=5,
                                  **({"batch_size": 8} if mode is Mode.RCB else {}))
    return c, c.frontend(0, cfg), cfg


# -- leases ------------------------------------------------------------------


def test_leases_renew_while_alive_and_expire_back_ends_first():
    c, fe, _ = _cluster()
    svc = LeaseService(c.sim, period_ns=1_000_000)
    svc.grant(fe.id, "frontend")
    svc.grant(0, "backend")
    seen = []
    svc.watch(lambda lease: seen.append((c.sim.now, lease.node)))
    c.sim.sleep(5_000_000)
    assert svc.alive(fe.id) and svc.alive(0) and not seen
    c.sim.crash_now(fe.id)
    c.sim.crash_now(0)
    c.sim.sleep(3_000_000)
    assert [n for _, n in seen] == [0, fe.id]
    assert not svc.alive(fe.id)
    assert sum(1 for e in svc.events if e[1] == "expire") == 2


# -- front-end crashes ----------------------------------------------------------


def _fe_crash_after(mode, n_ops, flush_at=None):
    c, fe, cfg = _cluster(mode)
    h = fe.create(0, Kind.BST)
    ops = [("insert", k, value_for(k, 1)) for k in range(n_ops)]
    for i, op in enumerate(ops):
        execute(fe, h, op)
        if flush_at == i:
            fe.fence()
    c.sim.crash_now(fe.id)
    fe, rep = recover_frontend(c.sim, c.backends, fe.id, cfg, sweep_with=[])
    fe.drain()
    c.quiesce()
    m = Model(Kind.BST)
    m.run(ops)
    return c, fe, rep, durable_content(c.backends, 0) == m.state()


def test_logged_but_unapplied_ops_are_reexecuted():
    c, fe, rep, same = _fe_crash_after(Mode.RCB, 5)
    assert rep.case == "2.c" and rep.ops_reexecuted == 5 and same


def test_clean_crash_after_fence_needs_no_redo():
    c, fe, rep, same = _fe_crash_after(Mode.RCB, 8)  # batch of 8 flushed on the 8th op
    assert rep.ops_reexecuted == 0 and same
    assert rep.case in ("1", "2.a")


def test_recovered_front_end_keeps_working_and_others_can_lock():
    c, fe, rep, _ = _fe_crash_after(Mode.RCB, 3)
    h = fe.open(0)
    fe.insert(h, 99, value_for(99, 0))
    fe.fence()
    other = c.frontend(1, FrontendConfig.for_mode(Mode.R))
    oh = other.open(0)
    other.insert(oh, 100, value_for(100, 0))
    other.fence()
    for k in range(4):
        word = c.sim.node(0).region
        assert lock_owner(int.from_bytes(word[c.backends[0].layout.lock_addr(oh.locks[k]):][:8], "little")) is None


def test_release_instead_of_adopt():
    c, fe, cfg = _cluster(Mode.RCB)
    h = fe.create(0, Kind.HASH, n_parts=1)
    fe.insert(h, 1, 5)
    c.sim.crash_now(fe.id)
    fe, rep = recover_frontend(c.sim, c.backends, fe.id, cfg, adopt=False)
    assert rep.locks_released == [h.locks[0]]
    assert rep.ops_reexecuted == 1


@pytest.mark.parametrize("mode", [Mode.R, Mode.RCB])
def test_every_front_end_crash_point_recovers(mode):
    kind, seed, n_ops = Kind.BST, 17, 12
    events, _ = dry_run(kind, mode, seed, n_ops)
    cases = Counter()
    for idx, phase in events:
        r = run_point(CrashPoint(f"fe@{idx}", "frontend", phase, kind, mode, seed, at_event=idx), n_ops)
        assert r.ok, (idx, r.detail)
        cases[r.case] += 1
    assert "2.b" in cases  # some crashes tear a record
    assert "2.c" in cases if mode is Mode.RCB else "2.a" in cases


def test_every_back_end_crash_point_recovers():
    kind, mode, seed, n_ops = Kind.HASH, Mode.RCB, 5, 12
    events, replays = dry_run(kind, mode, seed, n_ops)
    cases = Counter()
    for idx, phase in events:
        r = run_point(CrashPoint(f"be@{idx}", "backend", phase, kind, mode, seed, at_event=idx), n_ops)
        assert r.ok, (idx, r.detail)
        cases[r.case] += 1
    for t in replays:
        r = run_point(CrashPoint(f"be@t{t}", "backend", "replay", kind, mode, seed, at_time=t + 1), n_ops)
        assert r.ok, (t, r.detail)
        cases[r.case] += 1
    assert {"3.a", "3.b"} <= set(cases)


# -- back-end and allocator ----------------------------------------------------------


def test_orphans_are_swept_but_deferred_window_is_not():
    c, fe, cfg = _cluster()
    h = fe.create(0, Kind.BST)
    for k in range(50):
        fe.insert(h, k, value_for(k, 0))
    fe.drain()
    node = c.backends[0]
    planted = fe.clients[0].malloc(3)
    waiting = fe.clients[0].malloc(2)
    fe.clients[0].deferred_free(waiting, 1000)
    assert set(node.allocated_blocks()) - reachable_blocks(node, [fe]) == set(planted)
    assert sorted(orphan_sweep(node, [fe])) == sorted(planted)
    assert all(node.is_allocated(b) for b in waiting)
    assert set(node.allocated_blocks()) == reachable_blocks(node, [fe])
    c.sim.sleep(2_000_000)
    assert not any(node.is_allocated(b) for b in waiting)


def test_dead_front_end_slabs_are_reclaimed():
    c, _, _ = _cluster()
    cfg = FrontendConfig.for_mode(Mode.RCB, sole_writer=True, batch_size=8,
                                  slab_size=4 * c.topo.block_size)
    fe = c.frontend(1, cfg)
    h = fe.create(0, Kind.HASH)
    for k in range(10):
        fe.insert(h, k, value_for(k, 0))
    fe.drain()
    cached = fe.owned_blocks(0)
    c.sim.crash_now(fe.id)
    node = c.backends[0]
    fe, rep = recover_frontend(c.sim, c.backends, fe.id, cfg, sweep_with=[])
    assert rep.orphans_reclaimed > 0
    assert rep.orphans_reclaimed == len(cached - reachable_blocks(node))
    assert set(node.allocated_blocks()) == reachable_blocks(node, [fe])


def test_backend_restart_with_live_front_end():
    c, fe, cfg = _cluster(Mode.R)
    h = fe.create(0, Kind.QUEUE)
    c.backends[0]._task.killed = True  # stop replay so records pile up
    for v in range(1, 6):
        fe.enqueue(h, v)
    c.sim.crash_now(0)
    node, rep = recover_backend(c.sim, 0, frontends=[fe])
    c.backends[0] = node
    assert rep.records_replayed == 5 and rep.sn_delta == 10
    fe.backend_recovered(0)
    fe.enqueue(h, 6)
    fe.drain()
    c.quiesce()
    assert durable_content(c.backends, 0) == [1, 2, 3, 4, 5, 6]


# -- mirrors ---------------------------------------------------------------


def _mirrored(nvm=True, ops=30):
    c, fe, cfg = _cluster(mirrors=1, mirror_nvm=nvm)
    h = fe.create(0, Kind.BST)
    plan = matrix_ops(Kind.BST, ops, 9)
    for op in plan:
        execute(fe, h, op)
    fe.drain()
    m = Model(Kind.BST)
    m.run(plan)
    return c, fe, h, m


def test_promote_nvm_mirror():
    c, fe, h, m = _mirrored()
    c.sim.crash_now(0)
    mirrors = [c.mirror_nodes[i] for i in c.mirrors[0]]
    node, rep = promote_mirror(c.sim, 0, mirrors, [fe])
    assert rep.case == "4" and node.role == "primary"
    c.backends = {node.id: node}
    fe.insert(h, 1000, value_for(1000, 0))
    m.apply(("insert", 1000, value_for(1000, 0)))
    fe.drain()
    c.quiesce()
    assert durable_content(c.backends, 0) == m.state()


def test_rebuild_from_non_nvm_mirror_on_spare():
    c, fe, h, m = _mirrored(nvm=False)
    c.sim.add_node(77, c.topo.capacity)
    c.sim.crash_now(0)
    mirrors = [c.mirror_nodes[i] for i in c.mirrors[0]]
    with pytest.raises(ServiceHalted):
        promote_mirror(c.sim, 0, mirrors, [fe])
    node, rep = promote_mirror(c.sim, 0, mirrors, [fe], spare=77)
    assert rep.case == "4.rebuild" and node.id == 77
    c.backends = {77: node}
    c.quiesce()
    assert durable_content(c.backends, 0) == m.state()


def test_no_mirror_left_halts():
    c, fe, h, m = _mirrored()
    for mid in c.mirrors[0]:
        c.sim.crash_now(mid)
    c.sim.crash_now(0)
    with pytest.raises(ServiceHalted):
        promote_mirror(c.sim, 0, [c.mirror_nodes[i] for i in c.mirrors[0]], [fe])


def test_mirror_failure_is_dropped_and_writes_continue():
    c, fe, h, m = _mirrored()
    mid = c.mirrors[0][0]
    c.sim.crash_now(mid)
    fe.insert(h, 500, value_for(500, 0))
    m.apply(("insert", 500, value_for(500, 0)))
    fe.drain()
    assert c.backends[0].dropped_mirrors == [mid]
    assert not c.backends[0].mirrors
    c.mirror_nodes.pop(mid)
    c.quiesce()
    assert durable_content(c.backends, 0) == m.state()
