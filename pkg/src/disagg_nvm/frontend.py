"""Front-end runtime: operation logging, batching, Gather-Apply and caching.

A user write takes the partition's writer lock (once per lock session),
persists its operation-log entry with one write verb and is recorded in a
per-partition pending buffer. Nothing touches the data area yet. When the
buffer holds ``batch_size`` operations, or on a fence or lock release, the
runtime *applies* the pending buffers: each structure computes its net effect
through an :class:`ApplyCtx`, which gathers node bytes (write-set, then
memo, then in-flight records, then page cache, then a remote read) and
collects every write into a coalesced write-set. The write-set becomes one
transaction record per back-end. The lock session ends with the flush.

With the operation log disabled the same machinery runs with a batch of one,
so every user write pays for its own record (body and commit mark sent as two
verbs), and the call returns only once the record is durable.

Records a front-end has written but the back-end has not replayed yet stay
visible to the front-end through an overlay keyed by address, so a read never
observes the data area behind its own writes.
"""

from __future__ import annotations

import bisect
import enum
import struct
from collections import deque
from dataclasses import dataclass

from .cache import PageCache, TreeCachePolicy
from .client import BackendClient
from .concurrency import (
    Acquired,
    Backoff,
    ReadStats,
    SeqlockReader,
    lock_owner,
    unpack_lock,
    writer_lock,
    writer_unlock,
)
from .errors import (
    ChecksumMismatch,
    ConfigError,
    DequeueEmpty,
    NvmError,
    PopEmpty,
    RegionBoundsError,
)
from .fabric import Simulator
from .layout import DS_ENTRY_SIZE, DsEntry, LogEntry
from .slab import SlabAllocator
from .structures import Kind, Op, default_partitions, make_structure, partition_route
from .structures.base import MAP_KINDS, ReaderMem
from .structures.bst import check_vector
from .structures.linear import BYPASS

U64 = struct.Struct("<Q")
KV = struct.Struct("<QQ")
TRANSFER_ARGS = struct.Struct("<QQQ")
MAX_PARTITIONS = 4


class Mode(str, enum.Enum):
    """Optimisation presets: naive, +replay, +cache, +batch (op log + batching)."""

    NAIVE = "naive"
    R = "R"
    RC = "RC"
    RCB = "RCB"


@dataclass
class FrontendConfig:
    op_log: bool = True
    decoupled: bool = True  # False: wait for replay after every flush
    cache: bool = True
    batch_size: int = 1024
    page_size: int = 1024
    cache_capacity: int = 1024  # pages
    rr_set_size: int = 32
    policy: str = "hybrid"
    slab_size: int | None = None  # default: one back-end block
    reclaim_threshold: int = 4
    verb_cap: int = 4096
    tree_level: int = 8
    tree_window: int = 1000
    hot_threshold: int = 64
    reclaim_delay_us: int = 1000
    sole_writer: bool = False  # no other front-end ever writes these structures
    seed: int = 0

    @classmethod
    def for_mode(cls, mode: Mode | str, **kw) -> "FrontendConfig":
        mode = Mode(mode)
        preset = {
            Mode.NAIVE: dict(op_log=False, decoupled=False, cache=False, batch_size=1),
            Mode.R: dict(op_log=False, decoupled=True, cache=False, batch_size=1),
            Mode.RC: dict(op_log=False, decoupled=True, cache=True, batch_size=1),
            Mode.RCB: dict(op_log=True, decoupled=True, cache=True, batch_size=1024),
        }[mode]
        preset.update(kw)
        return cls(**preset)

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.op_log and self.batch_size != 1:
            raise ConfigError("batching needs the operation log (acks wait for the record otherwise)")
        if self.page_size < 8 or self.page_size % 8:
            raise ConfigError("page_size must be a positive multiple of 8")
        if self.cache_capacity < 0 or self.rr_set_size < 1:
            raise ConfigError("cache_capacity must be >= 0 and rr_set_size >= 1")


@dataclass
class FrontendStats:
    ops: int = 0
    writes: int = 0
    reads: int = 0
    flushes: int = 0
    records: int = 0
    entries: int = 0
    annulled: int = 0
    lock_acquires: int = 0
    cas_attempts: int = 0
    lock_wait_ns: int = 0
    reexecuted: int = 0
    foreign_retired: int = 0


@dataclass
class DsHandle:
    ds_id: int
    kind: Kind
    struct: object
    n_parts: int
    param: int
    part_be: list[int]
    roots: list[int]
    locks: list[int]

    def route(self, key: int) -> int:
        return partition_route(key, self.n_parts)


@dataclass
class _Retired:
    seq: int
    addr: int
    due: int


class ApplyCtx:
    """Memory view used while applying pending operations on one back-end.

    Reads and writes of one address always use the same length (nodes are
    written whole, anchors and bucket words as 8-byte words), so lookups in
    the write-set, memo and overlay are exact-address lookups.
    """

    def __init__(self, fe: "FrontEnd", be: int, *, write: bool = True):
        self.fe = fe
        self.be = be
        self.ws: dict[int, bytes] = {}
        self.memo: dict[int, bytes] | None = {} if write else None
        self.fresh: dict[int, int] = {}
        self.retired: list[int] = []
        self.writable = write

    def read(self, addr: int, n: int, depth: int | None = None) -> bytes:
        if addr <= 0:
            raise ValueError("null pointer dereference")
        d = self.ws.get(addr)
        if d is not None and len(d) == n:
            return d
        if self.memo is not None:
            d = self.memo.get(addr)
            if d is not None and len(d) == n:
                return d
        data = self.fe._gather(self.be, addr, n, depth)
        if self.memo is not None:
            self.memo[addr] = data
        return data

    def read_word(self, addr: int) -> int:
        return U64.unpack(self.read(addr, 8))[0]

    def put(self, addr: int, data: bytes) -> None:
        if not self.writable:
            raise RuntimeError("read-only view")
        self.ws[addr] = bytes(data)

    def put_word(self, addr: int, value: int) -> None:
        self.put(addr, U64.pack(value))

    def alloc(self, n: int) -> int:
        slab = self.fe.slabs[self.be]
        addr = slab.alloc(n)
        self.fresh[addr] = slab.size_of(addr)
        return addr

    def is_fresh(self, addr: int) -> bool:
        return addr in self.fresh

    def retire(self, addr: int) -> None:
        if addr in self.fresh:
            # never published: drop its writes and reuse it right away
            del self.fresh[addr]
            self.ws.pop(addr, None)
            if self.memo is not None:
                self.memo.pop(addr, None)
            self.fe.slabs[self.be].free(addr)
        else:
            self.retired.append(addr)

    def entries(self) -> list[LogEntry]:
        """Write-set in emission order: writes into fresh extents first.

        A reader that follows a pointer written later in the record always
        finds the target already complete.
        """
        spans = sorted(self.fresh.items())
        starts = [a for a, _ in spans]

        def in_fresh(addr: int) -> bool:
            i = bisect.bisect_right(starts, addr) - 1
            return i >= 0 and addr < spans[i][0] + spans[i][1]

        first, rest = [], []
        for addr, data in self.ws.items():
            (first if in_fresh(addr) else rest).append(LogEntry(addr, data))
        return first + rest

    def abort(self) -> None:
        slab = self.fe.slabs[self.be]
        for addr in list(self.fresh):
            try:
                slab.free(addr)
            except NvmError:
                pass
        self.fresh.clear()
        self.ws.clear()


class FrontEnd:
    """One front-end node: a single task drives it (SWMR per partition)."""

    def __init__(self, sim: Simulator, node_id: int, backends: list[int],
                 config: FrontendConfig | None = None):
        self.sim = sim
        self.id = node_id
        self.cfg = config or FrontendConfig()
        self.cfg.validate()
        self.backends = list(backends)
        self.clients: dict[int, BackendClient] = {}
        self.slabs: dict[int, SlabAllocator] = {}
        for be in self.backends:
            self._connect(be)
        self.cache = (PageCache(self.cfg.cache_capacity, self.cfg.page_size, self.cfg.policy,
                                self.cfg.rr_set_size, self.cfg.seed)
                      if self.cfg.cache and self.cfg.cache_capacity > 0 else None)
        self.tree_policy = TreeCachePolicy(self.cfg.tree_level, self.cfg.tree_window)
        self.handles: dict[int, DsHandle] = {}
        self.pending: dict[tuple[int, int], object] = {}
        self.n_pending = 0
        self.held: dict[tuple[int, int], Acquired] = {}
        self.guess: dict[tuple[int, int], int] = {}
        self.session = 0
        self.overlay: dict[tuple[int, int], tuple[int, bytes]] = {}
        self.quarantine: dict[int, deque[_Retired]] = {be: deque() for be in self.backends}
        self.unrecorded: dict[int, bool] = {be: False for be in self.backends}
        self.stats = FrontendStats()
        self.read_stats = ReadStats()
        self._views: dict[int, ApplyCtx] = {}

    # -- wiring ----------------------------------------------------------

    def _connect(self, be: int) -> None:
        client = BackendClient(self.sim, self.id, be, verb_cap=self.cfg.verb_cap,
                               separate_commit=not self.cfg.op_log).connect()
        lay = client.layout
        if self.cfg.op_log and lay.oplog_slots < 2 * self.cfg.batch_size:
            raise ConfigError("operation-log area must hold at least two batches")
        slab_size = self.cfg.slab_size or lay.block_size
        self.clients[be] = client
        self.slabs[be] = SlabAllocator(
            slab_size, lay.block_size,
            grab=lambda n, c=client: c.malloc(n, contiguous=True)[0],
            release=client.free,
            reclaim_threshold=self.cfg.reclaim_threshold,
        )

    def _view(self, be: int) -> ApplyCtx:
        view = self._views.get(be)
        if view is None:
            view = self._views[be] = ApplyCtx(self, be, write=False)
        return view

    def _tick(self) -> None:
        self.stats.ops += 1
        if self.sim.latency.cpu_op_ns:
            self.sim.sleep(self.sim.latency.cpu_op_ns)

    # -- data structure handles ------------------------------------------

    def _handle(self, ds_id: int, kind: Kind, n_parts: int, param: int) -> DsHandle:
        if not 1 <= n_parts <= MAX_PARTITIONS:
            raise ConfigError(f"partition count must be 1..{MAX_PARTITIONS}")
        part_be = [self.backends[p % len(self.backends)] for p in range(n_parts)]
        lay = self.clients[part_be[0]].layout
        if ds_id < 0 or ds_id >= lay.n_ds or (ds_id + 1) * MAX_PARTITIONS > lay.root_slots:
            raise ConfigError(f"ds_id {ds_id} out of range")
        slots = [ds_id * MAX_PARTITIONS + p for p in range(n_parts)]
        roots = [self.clients[part_be[p]].layout.root_addr(s) for p, s in enumerate(slots)]
        h = DsHandle(ds_id, kind, make_structure(kind, param, self.cfg.hot_threshold),
                     n_parts, param, part_be, roots, slots)
        self.handles[ds_id] = h
        return h

    def create(self, ds_id: int, kind: Kind | int, n_parts: int | None = None, param: int = 0) -> DsHandle:
        kind = Kind(kind)
        n_parts = n_parts or default_partitions(kind)
        h = self._handle(ds_id, kind, n_parts, param)
        self.flush()
        self._lock([(h, p) for p in range(n_parts)])
        for be in sorted(set(h.part_be)):
            parts = [p for p in range(n_parts) if h.part_be[p] == be]
            seq = self._emit(be, [lambda ctx, p=p: h.struct.init_partition(ctx, h.roots[p]) for p in parts], [])
            client = self.clients[be]
            entry = DsEntry(ds_id, int(kind), n_parts, h.locks[0], h.struct.param)
            client.sim.write(self.id, be, client.layout.ds_entry_addr(ds_id), entry.encode())
            if seq is not None:
                client.wait_applied(seq)
        self._release_all()
        return h

    def open(self, ds_id: int) -> DsHandle:
        if ds_id in self.handles:
            return self.handles[ds_id]
        client = self.clients[self.backends[0]]
        raw = client.read(client.layout.ds_entry_addr(ds_id), DS_ENTRY_SIZE)
        entry = DsEntry.decode(raw, 0)
        if entry is None:
            raise ConfigError(f"no data structure with id {ds_id}")
        return self._handle(ds_id, Kind(entry.kind), entry.n_parts, entry.param)

    def open_all(self) -> list[DsHandle]:
        client = self.clients[self.backends[0]]
        lay = client.layout
        raw = client.read(lay.ds_table_off, lay.n_ds * DS_ENTRY_SIZE)
        out = []
        for i in range(lay.n_ds):
            entry = DsEntry.decode(raw, i * DS_ENTRY_SIZE)
            if entry is not None:
                out.append(self.open(entry.ds_id))
        return out

    # -- locks -----------------------------------------------------------

    def _lock_keys(self, targets) -> list[tuple[int, int]]:
        return sorted({(h.part_be[p], h.locks[p]) for h, p in targets})

    def _acquire(self, key: tuple[int, int], spin: bool) -> bool:
        be, index = key
        client = self.clients[be]
        self.session += 1
        acq = writer_lock(client, index, self.session, self.guess.get(key, 0), spin=spin)
        if acq is None:
            return False
        self.held[key] = acq
        self.stats.lock_acquires += 1
        self.stats.cas_attempts += acq.cas_attempts
        self.stats.lock_wait_ns += acq.waited_ns
        if acq.last_slot is not None and acq.last_slot != client.slot:
            self.purge_cache()
        self._cursor_moved(be)
        return True

    def _lock(self, targets) -> None:
        need = [k for k in self._lock_keys(targets) if k not in self.held]
        if not need:
            return
        if self.held:
            # holding other locks: never wait while holding (no hold-and-wait)
            for key in need:
                if not self._acquire(key, spin=False):
                    self.flush()
                    break
            else:
                return
            need = [k for k in self._lock_keys(targets) if k not in self.held]
        for key in need:  # sorted order
            self._acquire(key, spin=True)

    def _release_all(self) -> None:
        for key in sorted(self.held):
            acq = self.held.pop(key)
            self.guess[key] = writer_unlock(self.clients[key[0]], acq)

    def holds(self, h: DsHandle, p: int) -> bool:
        return (h.part_be[p], h.locks[p]) in self.held

    def adopt_locks(self) -> list[tuple[int, int]]:
        """Take over lock words still owned by this node id (a previous incarnation)."""
        adopted = []
        for be, client in self.clients.items():
            lay = client.layout
            raw = client.read(lay.lock_table_off, 8 * lay.n_locks)
            for i in range(lay.n_locks):
                word = U64.unpack_from(raw, 8 * i)[0]
                if lock_owner(word) == self.id and (be, i) not in self.held:
                    self.session += 1
                    _, last_slot, _ = unpack_lock(word)
                    self.held[(be, i)] = Acquired(i, word, self.session, 0, last_slot, 0)
                    adopted.append((be, i))
        return adopted

    # -- cursor, overlay and quarantine ------------------------------------

    def _cursor_moved(self, be: int) -> None:
        lpn = self.clients[be].lpn_seen
        stale = [k for k, (seq, _) in self.overlay.items() if k[0] == be and seq < lpn]
        for k in stale:
            _, data = self.overlay.pop(k)
            self._patch_cache(be, k[1], data)
        q = self.quarantine[be]
        slab = self.slabs[be]
        while q and q[0].seq < lpn and q[0].due <= self.sim.now:
            addr = q.popleft().addr
            if slab.size_of(addr) is None:
                # allocated by another front-end (or a dead incarnation of this
                # one): its block goes back through the orphan sweep
                self.stats.foreign_retired += 1
            else:
                slab.free(addr)

    def _patch_cache(self, be: int, addr: int, data: bytes) -> None:
        if self.cache is None:
            return
        ps = self.cfg.page_size
        end = addr + len(data)
        for pi in range(addr // ps, (end - 1) // ps + 1):
            page = self.cache.peek((be, pi))
            if page is None:
                continue
            lo, hi = max(addr, pi * ps), min(end, pi * ps + len(page))
            if lo < hi:
                page[lo - pi * ps:hi - pi * ps] = data[lo - addr:hi - addr]

    def purge_cache(self) -> None:
        if self.cache is not None:
            self.cache.purge()

    def _gather(self, be: int, addr: int, n: int, depth: int | None) -> bytes:
        ov = self.overlay.get((be, addr))
        if ov is not None and len(ov[1]) == n:
            return ov[1]
        client = self.clients[be]
        cacheable = self.cache is not None and depth != BYPASS
        tree = depth is not None and depth >= 0
        if cacheable and tree:
            cacheable = self.tree_policy.cacheable(depth)
        if not cacheable:
            self.stats.reads += 1
            return client.read(addr, n)
        ps = self.cfg.page_size
        cap = client.layout.capacity
        first, last = addr // ps, (addr + n - 1) // ps
        buf = bytearray()
        hit = True
        for pi in range(first, last + 1):
            page = self.cache.get((be, pi))
            if page is None:
                hit = False
                self.stats.reads += 1
                page = client.read(pi * ps, min(ps, cap - pi * ps))
                self.cache.put((be, pi), page)
            buf += page
        if tree:
            self.tree_policy.record(hit)
        off = addr - first * ps
        return bytes(buf[off:off + n])

    # -- write path ------------------------------------------------------

    def _pend(self, h: DsHandle, p: int):
        key = (h.ds_id, p)
        pend = self.pending.get(key)
        if pend is None:
            pend = self.pending[key] = h.struct.new_pending()
        return pend

    def _oplog(self, h: DsHandle, p: int, op: Op, params: bytes) -> None:
        if self.cfg.op_log:
            be = h.part_be[p]
            self.clients[be].op_log_write(int(op), h.ds_id, params)
            self.unrecorded[be] = True

    def _wrote(self, pend, op) -> None:
        pend.ops.append(op)
        self.n_pending += 1
        self.stats.writes += 1
        if self.n_pending >= self.cfg.batch_size:
            self.flush()

    def insert(self, h: DsHandle, key: int, value: int) -> None:
        self._tick()
        p = h.route(key)
        self._lock([(h, p)])
        self._oplog(h, p, Op.INSERT, KV.pack(key, value))
        pend = self._pend(h, p)
        pend.set(key, value)
        self._wrote(pend, Op.INSERT)

    def delete(self, h: DsHandle, key: int) -> None:
        self._tick()
        p = h.route(key)
        self._lock([(h, p)])
        self._oplog(h, p, Op.DELETE, U64.pack(key))
        pend = self._pend(h, p)
        pend.set(key, None)
        self._wrote(pend, Op.DELETE)

    def vector_insert(self, h: DsHandle, kvs) -> None:
        """Insert a sorted, duplicate-free vector; applied with one tree walk per batch."""
        kvs = list(kvs)
        check_vector(kvs)
        for k, v in kvs:
            self.insert(h, k, v)

    def push(self, h: DsHandle, value: int) -> None:
        self._tick()
        self._lock([(h, 0)])
        self._oplog(h, 0, Op.PUSH, U64.pack(value))
        pend = self._pend(h, 0)
        h.struct.push(pend, value)
        self._wrote(pend, Op.PUSH)

    def pop(self, h: DsHandle) -> int:
        self._tick()
        self._lock([(h, 0)])
        self._oplog(h, 0, Op.POP, b"")
        pend = self._pend(h, 0)
        before = pend.annulled
        value = h.struct.pop(self._view(h.part_be[0]), h.roots[0], pend)
        self.stats.annulled += pend.annulled - before
        self._wrote(pend, Op.POP)
        return value

    def enqueue(self, h: DsHandle, value: int) -> None:
        self._tick()
        self._lock([(h, 0)])
        self._oplog(h, 0, Op.ENQUEUE, U64.pack(value))
        pend = self._pend(h, 0)
        h.struct.enqueue(pend, value)
        self._wrote(pend, Op.ENQUEUE)

    def dequeue(self, h: DsHandle) -> int:
        self._tick()
        self._lock([(h, 0)])
        self._oplog(h, 0, Op.DEQUEUE, b"")
        pend = self._pend(h, 0)
        before = pend.annulled
        value = h.struct.dequeue(self._view(h.part_be[0]), h.roots[0], pend)
        self.stats.annulled += pend.annulled - before
        self._wrote(pend, Op.DEQUEUE)
        return value

    def transfer(self, h: DsHandle, a: int, b: int, amount: int) -> int:
        """Move up to ``amount`` from account ``a`` to ``b``; returns the amount moved.

        Two reads and two writes under one lock session, logged as one operation.
        """
        if h.kind not in MAP_KINDS:
            raise ConfigError("transfer needs a map structure")
        self._tick()
        pa, pb = h.route(a), h.route(b)
        if h.part_be[pa] != h.part_be[pb]:
            raise ConfigError("both accounts must live on one back-end")
        self._lock([(h, pa), (h, pb)])
        self._oplog(h, pa, Op.TRANSFER, TRANSFER_ARGS.pack(a, b, amount))
        bal_a = self._owner_find(h, pa, a) or 0
        bal_b = self._owner_find(h, pb, b) or 0
        moved = min(amount, bal_a) if a != b else 0
        pend_a = self._pend(h, pa)
        if moved:
            pend_a.set(a, bal_a - moved)
            self._pend(h, pb).set(b, bal_b + moved)
        self._wrote(pend_a, Op.TRANSFER)
        return moved

    # -- read path -------------------------------------------------------

    def _owner_find(self, h: DsHandle, p: int, key: int):
        pend = self.pending.get((h.ds_id, p))
        if pend is not None:
            v = pend.lookup(key)
            if v is not ...:
                return v
        return h.struct.find(self._view(h.part_be[p]), h.roots[p], key)

    def find(self, h: DsHandle, key: int) -> int | None:
        self._tick()
        p = h.route(key)
        if self.cfg.sole_writer or self.holds(h, p):
            return self._owner_find(h, p, key)
        return self.reader_find(h, key)

    def reader_find(self, h: DsHandle, key: int) -> int | None:
        """Lookup without the writer lock, using the kind's reader protocol."""
        p = h.route(key)
        client = self.clients[h.part_be[p]]
        mem = ReaderMem(client.read, lambda a: U64.unpack(client.read(a, 8))[0])
        root = h.roots[p]
        st = h.struct
        if st.reader_mode == "seqlock":
            return SeqlockReader(client, self.read_stats).read(lambda: st.find(mem, root, key))
        backoff = Backoff(self.sim)
        while True:
            self.read_stats.attempts += 1
            try:
                if st.reader_mode == "snapshot":
                    return st.find_at(mem, client.atomic_read(root), key)
                return st.find(mem, root, key)
            except (ChecksumMismatch, RegionBoundsError, ValueError):
                self.read_stats.retries += 1
                self.read_stats.torn_consistent += 1
                backoff.pause()

    def snapshot(self, h: DsHandle, p: int = 0) -> int:
        """Current root of a multi-version partition (one atomic read)."""
        return self.clients[h.part_be[p]].atomic_read(h.roots[p])

    def find_at(self, h: DsHandle, p: int, snap: int, key: int) -> int | None:
        client = self.clients[h.part_be[p]]
        mem = ReaderMem(client.read, lambda a: U64.unpack(client.read(a, 8))[0])
        return h.struct.find_at(mem, snap, key)

    # -- flush -----------------------------------------------------------

    def _emit(self, be: int, work, keys) -> int | None:
        """Apply ``work`` on back-end ``be`` and append the resulting record.

        On a failure before the record is appended nothing changes except
        the cache, which is cleared; the pending buffers stay for a retry.
        Once appended, the record is owned by the client and re-sent after
        a back-end restart.
        """
        client = self.clients[be]
        ctx = ApplyCtx(self, be)
        try:
            for fn in work:
                fn(ctx)
            entries = ctx.entries()
        except NvmError:
            ctx.abort()
            self.purge_cache()
            raise
        if not entries and not self.unrecorded[be]:
            self._drop_pending(keys)
            return None
        opn_hi = client.next_opn if self.cfg.op_log else 0
        before = client.next_seq
        failure = None
        try:
            client.remote_tx_write(entries, opn_hi)
        except NvmError as exc:
            if client.next_seq == before:
                ctx.abort()
                self.purge_cache()
                raise
            failure = exc
        seq = before
        self.unrecorded[be] = False
        for e in entries:
            self.overlay[(be, e.address)] = (seq, e.data)
            self._patch_cache(be, e.address, e.data)
        lockfree = any(self.handles[k[0]].struct.reader_mode != "seqlock" for k in keys
                       if k[0] in self.handles)
        due = self.sim.now + (self.cfg.reclaim_delay_us * 1000 if lockfree else 0)
        for addr in ctx.retired:
            self.quarantine[be].append(_Retired(seq, addr, due))
        self._drop_pending(keys)
        self.stats.records += 1
        self.stats.entries += len(entries)
        if failure is not None:
            self.purge_cache()
            raise failure
        if not self.cfg.decoupled:
            client.wait_applied(seq)
            self._cursor_moved(be)
        return seq

    def _drop_pending(self, keys) -> None:
        for k in keys:
            pend = self.pending.pop(k, None)
            if pend is not None:
                self.n_pending -= len(pend.ops)

    def flush(self) -> None:
        """Apply every pending buffer, one record per back-end, then end the lock session."""
        by_be: dict[int, list] = {}
        for key in self.pending:
            h = self.handles[key[0]]
            by_be.setdefault(h.part_be[key[1]], []).append(key)
        for be in self.backends:
            if be not in by_be and not self.unrecorded[be]:
                continue
            keys = by_be.get(be, [])
            work = []
            for key in keys:
                h = self.handles[key[0]]
                pend = self.pending[key]
                work.append(lambda ctx, h=h, p=key[1], pend=pend: h.struct.apply(ctx, h.roots[p], pend))
            self._emit(be, work, keys)
        self.stats.flushes += 1
        self._release_all()

    def fence(self) -> None:
        """Return once every earlier write is durable in a committed record."""
        self.flush()

    def drain(self) -> None:
        """Fence, then wait until the back-ends have replayed everything (tests, benches)."""
        self.flush()
        for be, client in self.clients.items():
            client.wait_applied()
            self._cursor_moved(be)

    # -- recovery hooks --------------------------------------------------

    def reexecute(self) -> int:
        """Re-run logged operations the back-end has not applied (OPN onwards)."""
        self.open_all()
        count = 0
        for be, client in self.clients.items():
            ops = []
            opn = client.next_opn
            for _ in range(client.oplog_slots):
                op = client.read_oplog(opn)
                if op is None:
                    break
                ops.append(op)
                opn += 1
            for op in ops:
                self._dispatch(op)
                count += 1
        self.stats.reexecuted += count
        self.flush()
        return count

    def _dispatch(self, op) -> None:
        h = self.open(op.ds_id)
        code = Op(op.opcode)
        try:
            if code is Op.INSERT:
                self.insert(h, *KV.unpack(op.params))
            elif code is Op.DELETE:
                self.delete(h, *U64.unpack(op.params))
            elif code is Op.PUSH:
                self.push(h, *U64.unpack(op.params))
            elif code is Op.POP:
                self.pop(h)
            elif code is Op.ENQUEUE:
                self.enqueue(h, *U64.unpack(op.params))
            elif code is Op.DEQUEUE:
                self.dequeue(h)
            elif code is Op.TRANSFER:
                self.transfer(h, *TRANSFER_ARGS.unpack(op.params))
        except (PopEmpty, DequeueEmpty):
            pass

    def backend_recovered(self, be: int) -> int:
        """The back-end restarted: clear the cache and re-send unapplied records."""
        self.purge_cache()
        client = self.clients[be]
        n = client.resend_unapplied()
        self._cursor_moved(be)
        return n

    def rebind(self, old: int, new: int) -> int:
        """Point everything that used back-end ``old`` at its replacement ``new``."""
        self.purge_cache()
        client = self.clients.pop(old)
        client.be = new
        self.clients[new] = client
        self.slabs[new] = self.slabs.pop(old)
        self.quarantine[new] = self.quarantine.pop(old)
        self.unrecorded[new] = self.unrecorded.pop(old)
        self.backends = [new if b == old else b for b in self.backends]
        for h in self.handles.values():
            h.part_be = [new if b == old else b for b in h.part_be]
        self.overlay = {((new if b == old else b), a): v for (b, a), v in self.overlay.items()}
        self.guess = {((new if b == old else b), i): w for (b, i), w in self.guess.items()}
        held, self.held = self.held, {}
        n = client.resend_unapplied()
        for (b, i), acq in sorted(held.items()):
            key = (new if b == old else b, i)
            if b == old:
                self._acquire(key, spin=True)
            else:
                self.held[key] = acq
        self._cursor_moved(new)
        return n

    # -- inspection ------------------------------------------------------

    def owned_blocks(self, be: int) -> set[int]:
        """Blocks this front-end may still touch: its slabs plus quarantined extents."""
        lay = self.clients[be].layout
        return self.slabs[be].owned_blocks() | {lay.block_addr(lay.block_of(q.addr)) for q in self.quarantine[be]}

    def counters(self) -> dict:
        out = dict(vars(self.stats))
        if self.cache is not None:
            out.update(cache_hits=self.cache.stats.hits, cache_misses=self.cache.stats.misses)
        out.update(read_attempts=self.read_stats.attempts, read_retries=self.read_stats.retries)
        return out
