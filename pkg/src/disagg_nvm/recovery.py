"""Failure detection and the recovery procedures.

Cases handled here:

1. reader front-end crash: the new incarnation reconnects, nothing to redo.
2. writer front-end crash: the back-end resolves the dead slot (replays its
   valid records, discards a torn tail), then the new incarnation adopts or
   releases the dead owner's locks and re-executes the logged operations from
   OPN onwards (2.a consistent tail, 2.b torn tail, 2.c operations ahead).
3. back-end transient failure: reopen the region, fix the SN parity, replay
   valid records, discard torn tails, sweep orphan blocks; live front-ends
   then re-send their unapplied records.
4. back-end permanent failure: promote a mirror (NVM mirrors replay their
   copy; otherwise the structures are rebuilt on a fresh node from the
   mirror's logs and archived data).
5. mirror failure: the primary drops it and carries on (see ``backend``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .backend import BackendNode, TxState
from .concurrency import lock_owner, pack_lock
from .errors import ConfigError, ServiceHalted
from .fabric import Simulator
from .frontend import FrontEnd, FrontendConfig
from .layout import DS_ENTRY_SIZE, LA_ACQUIRE, ROOT_SLOT_SIZE, DsEntry, OpLogEntry, OPLOG_SLOT, write_u64
from .structures import Kind, RawMem, make_structure

U64 = struct.Struct("<Q")
LEASE_NS = 10_000_000
MAX_PARTITIONS = 4


@dataclass
class RecoveryReport:
    case: str
    node: int
    records_replayed: int = 0
    ops_reexecuted: int = 0
    sn_delta: int = 0
    torn_bytes: int = 0
    locks_released: list[int] = field(default_factory=list)
    orphans_reclaimed: int = 0
    slots: dict[int, str] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return dict(vars(self))


# -- leases ---------------------------------------------------------------


@dataclass
class Lease:
    node: int
    role: str
    expiry: int


class LeaseService:
    """In-simulation keepAlive authority.

    Each holder renews at half the lease period from a task bound to its own
    node, so a crashed node stops renewing by construction. The watcher
    reports expiries with back-ends ahead of front-ends, which makes
    back-end recovery run first when both fail together.
    """

    def __init__(self, sim: Simulator, period_ns: int = LEASE_NS):
        self.sim = sim
        self.period = period_ns
        self.leases: dict[int, Lease] = {}
        self.events: list[tuple[int, str, int]] = []
        self._reported: set[int] = set()

    def grant(self, node: int, role: str = "frontend") -> Lease:
        lease = Lease(node, role, self.sim.now + self.period)
        self.leases[node] = lease
        self._reported.discard(node)
        self.events.append((self.sim.now, "grant", node))
        self.sim.spawn(self._renew, node, node=node, name=f"lease@{node}")
        return lease

    def _renew(self, node: int) -> None:
        while True:
            self.sim.sleep(self.period // 2)
            lease = self.leases.get(node)
            if lease is None:
                return
            lease.expiry = self.sim.now + self.period
            self.events.append((self.sim.now, "renew", node))

    def alive(self, node: int) -> bool:
        lease = self.leases.get(node)
        return lease is not None and lease.expiry >= self.sim.now

    def expired(self) -> list[Lease]:
        """Newly expired leases, back-ends first."""
        out = [l for n, l in self.leases.items() if l.expiry < self.sim.now and n not in self._reported]
        out.sort(key=lambda l: (l.role != "backend", l.node))
        for l in out:
            self._reported.add(l.node)
            self.events.append((self.sim.now, "expire", l.node))
        return out

    def watch(self, on_expire, interval_ns: int | None = None):
        """Spawn the authority loop; ``on_expire(lease)`` runs for each expiry."""
        interval = interval_ns or self.period // 2

        def loop():
            while True:
                self.sim.sleep(interval)
                for lease in self.expired():
                    on_expire(lease)

        return self.sim.spawn(loop, name="keepalive")


# -- back-end side ---------------------------------------------------------


def _replay_slot(node: BackendNode, slot: int) -> int:
    """Let the replay service (or this call) drain a slot's valid chain."""
    n = 0
    while True:
        while slot in node._applying:
            node.sim.sleep(node.sim.latency.nvm_write_ns or 1)
        rec = node.next_record(slot)
        if rec is None:
            return n
        node._apply_record(slot, *rec, timed=False)
        n += 1


def ops_ahead(node: BackendNode, slot: int) -> int:
    """Valid operation-log entries at and after the slot's OPN."""
    base = node.layout.oplog_area(slot)
    opn = node.opn(slot)
    count = 0
    for _ in range(node.layout.oplog_slots):
        op = OpLogEntry.decode(node.region, base + (opn % node.layout.oplog_slots) * OPLOG_SLOT)
        if op is None or op.opn != opn:
            break
        count += 1
        opn += 1
    return count


def structure_extents(node: BackendNode) -> list[tuple[int, int]]:
    """(address, length) of every node reachable from the root table."""
    lay = node.layout
    mem = RawMem(node.region)
    out = []
    for i in range(lay.n_ds):
        entry = DsEntry.decode(node.region, lay.ds_entry_addr(i))
        if entry is None:
            continue
        st = make_structure(entry.kind, entry.param)
        for p in range(entry.n_parts):
            root = lay.root_addr(entry.ds_id * MAX_PARTITIONS + p)
            if node.region[root:root + ROOT_SLOT_SIZE] == bytes(ROOT_SLOT_SIZE):
                continue
            out += st.walk(mem, root).extents
    return out


def reachable_blocks(node: BackendNode, frontends=()) -> set[int]:
    lay = node.layout
    blocks = {lay.block_addr(b) for b in range(lay.root_blocks)}
    for addr, length in structure_extents(node):
        for b in range(lay.block_of(addr), lay.block_of(addr + length - 1) + 1):
            blocks.add(lay.block_addr(b))
    for fe in frontends:
        if node.id in fe.slabs:
            blocks |= fe.owned_blocks(node.id)
    blocks |= node.pending_deferred()
    return blocks


def orphan_sweep(node: BackendNode, frontends=(), delay_us: int = 0) -> list[int]:
    """Free allocated blocks that nothing references."""
    live = reachable_blocks(node, frontends)
    orphans = [a for a in node.allocated_blocks() if a not in live]
    if orphans:
        node.deferred_free(orphans, delay_us)
    return orphans


def recover_backend(sim: Simulator, node_id: int, *, frontends=(), sweep: bool = True,
                    sweep_delay_us: int = 0, **open_kw) -> tuple[BackendNode, RecoveryReport]:
    """Case 3: reopen a revived back-end and bring its logs to a clean state."""
    if not sim.is_alive(node_id):
        sim.revive(node_id)
    node = BackendNode.open(sim, node_id, **open_kw)
    sn_before = node.seqno
    node.fix_seqno_parity()
    report = RecoveryReport("3.a", node_id)
    for slot in node.owned_slots():
        v = node.validate_slot(slot)
        report.records_replayed += _replay_slot(node, slot)
        if v.state is TxState.INCONSISTENT:
            report.torn_bytes += node.discard_log_tail(slot)
            report.slots[slot] = "3.b"
        elif ops_ahead(node, slot):
            report.slots[slot] = "3.c"
        else:
            report.slots[slot] = "3.a"
    if "3.b" in report.slots.values():
        report.case = "3.b"
    elif "3.c" in report.slots.values():
        report.case = "3.c"
    report.sn_delta = node.seqno - sn_before
    if sweep:
        report.orphans_reclaimed = len(orphan_sweep(node, frontends, sweep_delay_us))
    node.start()
    sim.local_log.append(("backend-live", sim.now, node_id))
    return node, report


def recover_orphan_locks(node: BackendNode, dead_fe: int) -> list[int]:
    """Release every lock word owned by ``dead_fe`` once its slot is resolved."""
    lay = node.layout
    slot = node.slot_of(dead_fe)
    released = []
    for i in range(lay.n_locks):
        word = U64.unpack_from(node.region, lay.lock_addr(i))[0]
        if lock_owner(word) != dead_fe:
            continue
        if slot is not None and node.lock_ahead(slot, i) & 3 != LA_ACQUIRE:
            node.sim.local_log.append(("lock-without-acquire-record", node.sim.now, i))
        lpn = node.cursor(slot)[0] if slot is not None else 0
        write_u64(node.region, lay.lock_addr(i), pack_lock(None, slot, lpn))
        released.append(i)
    return released


def resolve_dead_slot(node: BackendNode, fe: int) -> tuple[TxState | None, int, int]:
    """Replay a dead front-end's valid records and drop its torn tail."""
    slot = node.slot_of(fe)
    if slot is None:
        return None, 0, 0
    state = node.validate_slot(slot).state
    applied = _replay_slot(node, slot)
    torn = 0
    if state is TxState.INCONSISTENT or node.validate_slot(slot).state is TxState.INCONSISTENT:
        torn = node.discard_log_tail(slot)
        state = TxState.INCONSISTENT
    return state, applied, torn


def recover_frontend(sim: Simulator, backends: dict[int, BackendNode], fe_id: int,
                     config: FrontendConfig | None = None, *, adopt: bool = True,
                     backend_order: list[int] | None = None,
                     sweep_with: list[FrontEnd] | None = None) -> tuple[FrontEnd, RecoveryReport]:
    """Case 1/2: bring a crashed front-end back and finish its logged work.

    With ``adopt`` the new incarnation takes over the dead owner's locks so
    no other writer can slip in before the re-execution; otherwise the words
    are released on the back-end first. ``sweep_with`` lists every other live
    front-end; when given, the blocks the dead incarnation had cached in its
    slabs are reclaimed afterwards.
    """
    report = RecoveryReport("1", fe_id)
    states = []
    order = backend_order or sorted(backends)
    for be in order:
        node = backends[be]
        state, applied, torn = resolve_dead_slot(node, fe_id)
        states.append(state)
        report.records_replayed += applied
        report.torn_bytes += torn
        if not adopt:
            report.locks_released += recover_orphan_locks(node, fe_id)
    if not sim.is_alive(fe_id):
        sim.revive(fe_id)
    fe = FrontEnd(sim, fe_id, order, config)
    if adopt:
        report.locks_released = [i for _, i in fe.adopt_locks()]
    report.ops_reexecuted = fe.reexecute()
    if sweep_with is not None:
        for be in order:
            report.orphans_reclaimed += len(orphan_sweep(backends[be], [fe, *sweep_with]))
    if TxState.INCONSISTENT in states:
        report.case = "2.b"
    elif report.ops_reexecuted:
        report.case = "2.c"
    elif report.records_replayed or report.locks_released or TxState.CONSISTENT in states:
        report.case = "2.a"
    return fe, report


# -- mirrors ---------------------------------------------------------------


def _reset_locks(node: BackendNode) -> None:
    lay = node.layout
    node.region[lay.lock_table_off:lay.lock_table_off + 8 * lay.n_locks] = bytes(8 * lay.n_locks)


def rebuild_from_archive(sim: Simulator, mirror: BackendNode, new_id: int) -> BackendNode:
    """Rebuild a back-end on ``new_id`` from a mirror without NVM.

    Metadata and logs come from the mirror's region, data from its archive
    of applied entries (in application order).
    """
    region = sim.node(new_id).region
    if region is None or len(region) != len(mirror.region):
        raise ConfigError("replacement node needs a region of the same size")
    lay = mirror.layout
    region[:] = bytes(len(region))
    region[:lay.data_off] = mirror.region[:lay.data_off]
    for addr, data in sim.node(mirror.id).disk:
        region[addr:addr + len(data)] = data
    return BackendNode.open(sim, new_id)


def promote_mirror(sim: Simulator, failed: int, mirrors: list[BackendNode], frontends=(), *,
                   spare: int | None = None) -> tuple[BackendNode, RecoveryReport]:
    """Case 4: replace a permanently failed back-end by one of its mirrors."""
    live = [m for m in mirrors if sim.is_alive(m.id)]
    nvm = [m for m in live if m.has_nvm]
    report = RecoveryReport("4", failed)
    if nvm:
        node = nvm[0]
        report.records_replayed = node.replay_step()
        node.role = "primary"
    elif live:
        if spare is None:
            raise ServiceHalted("no NVM mirror and no spare node to rebuild on")
        source = live[0]
        source.replay_step()
        node = rebuild_from_archive(sim, source, spare)
        report.records_replayed = node.replay_step()
        report.case = "4.rebuild"
    else:
        raise ServiceHalted(f"back-end {failed} lost with no live mirror")
    node.fix_seqno_parity()
    _reset_locks(node)
    node.mirrors = []
    node.start()
    sim.local_log.append(("promoted", sim.now, failed, node.id))
    for fe in frontends:
        if sim.is_alive(fe.id) and failed in fe.clients:
            fe.rebind(failed, node.id)
    return node, report


def region_equal_data(a: BackendNode, b: BackendNode) -> bool:
    lay = a.layout
    return a.region[lay.data_off:] == b.region[lay.data_off:]


def ds_entries(node: BackendNode) -> list[DsEntry]:
    lay = node.layout
    out = []
    for i in range(lay.n_ds):
        e = DsEntry.decode(node.region, lay.ds_entry_addr(i))
        if e is not None:
            out.append(e)
    return out


def durable_content(nodes: dict[int, BackendNode], ds_id: int, backends: list[int] | None = None):
    """Contents of one structure straight from NVM (sorted items, or a sequence)."""
    order = backends or sorted(nodes)
    first = nodes[order[0]]
    entry = DsEntry.decode(first.region, first.layout.ds_entry_addr(ds_id))
    if entry is None:
        raise ConfigError(f"no data structure {ds_id}")
    st = make_structure(entry.kind, entry.param)
    if Kind(entry.kind) in (Kind.STACK, Kind.QUEUE):
        node = nodes[order[0]]
        return st.walk(RawMem(node.region), node.layout.root_addr(ds_id * MAX_PARTITIONS)).content
    items = []
    for p in range(entry.n_parts):
        node = nodes[order[p % len(order)]]
        items += st.walk(RawMem(node.region), node.layout.root_addr(ds_id * MAX_PARTITIONS + p)).content
    return sorted(items)


def check_structures(nodes: dict[int, BackendNode]) -> list[str]:
    """Run each structure's shape check on every initialised partition."""
    problems = []
    for node in nodes.values():
        lay = node.layout
        mem = RawMem(node.region)
        for entry in ds_entries(node):
            st = make_structure(entry.kind, entry.param)
            for p in range(entry.n_parts):
                root = lay.root_addr(entry.ds_id * MAX_PARTITIONS + p)
                if node.region[root:root + ROOT_SLOT_SIZE] == bytes(ROOT_SLOT_SIZE):
                    continue
                try:
                    ok = st.check(mem, root)
                except Exception as exc:  # a corrupt node is a failed check
                    ok = False
                    problems.append(f"node {node.id} ds {entry.ds_id}.{p}: {exc!r}")
                    continue
                if not ok:
                    problems.append(f"node {node.id} ds {entry.ds_id}.{p}: shape check failed")
    return problems


__all__ = [
    "DS_ENTRY_SIZE", "Lease", "check_structures", "LeaseService", "RecoveryReport", "ds_entries", "durable_content",
    "ops_ahead", "orphan_sweep", "promote_mirror", "reachable_blocks", "rebuild_from_archive",
    "recover_backend", "recover_frontend", "recover_orphan_locks", "region_equal_data",
    "resolve_dead_slot", "structure_extents",
]
