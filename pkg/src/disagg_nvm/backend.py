"""The passive back-end NVM node.

The node never issues verbs of its own except to replicate durable bytes to
its mirrors. All of its logic runs in two places:

* ``on_write``: invoked by the fabric when a front-end write lands. It serves
  mailbox requests (allocation), forwards log bytes to mirrors and wakes the
  replay service.
* the replay service, a task bound to this node that applies committed
  transaction records in order, bumping the sequence number around each one.

A crash of the node discards this object; :meth:`BackendNode.open` rebuilds it
from the durable region.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    ChecksumMismatch,
    ConfigError,
    DestinationUnreachable,
    NodeCrashed,
)
from .fabric import Signal, Simulator
from .layout import (
    D_CURSOR,
    D_LOCK_AHEAD,
    D_LOG_LEN,
    D_LOG_OFF,
    D_MBOX_REQ,
    D_MBOX_RESP,
    D_OPLOG_OFF,
    D_OPLOG_SLOTS,
    D_OPN,
    D_OWNER,
    DESC_FIXED,
    FLAG_OPREF,
    HEADER_SIZE,
    MBOX_SLOT,
    OPLOG_SLOT,
    DecodedEntry,
    Layout,
    OpLogEntry,
    RecordHeader,
    decode_entries,
    pack_cursor,
    peek_header,
    read_u64,
    record_valid,
    unpack_cursor,
    unpack_opref,
    write_u64,
)

# mailbox opcodes and status codes
MB_MALLOC = 1
MB_FREE = 2
MB_DEFERRED_FREE = 3

ST_OK = 0
ST_OOM = 1
ST_DOUBLE_FREE = 2
ST_BAD = 3

MB_HDR = struct.Struct("<QII")  # seq, op/status, count
MB_MAX_ARGS = (MBOX_SLOT - MB_HDR.size) // 8


class TxState(enum.Enum):
    EMPTY = "Empty"
    CONSISTENT = "Consistent"
    INCONSISTENT = "Inconsistent"


@dataclass
class SlotValidation:
    slot: int
    state: TxState
    valid_records: int
    lpn: int


@dataclass
class MirrorLink:
    node: int
    has_nvm: bool


@dataclass
class BackendStats:
    records_applied: int = 0
    entries_applied: int = 0
    rpcs: int = 0
    replicated_writes: int = 0
    double_frees: int = 0
    uaf_reads: list = field(default_factory=list)

    @property
    def work_units(self) -> int:
        return self.records_applied + self.entries_applied + self.rpcs


class BackendNode:
    """Service object attached to a simulated node's NVM region."""

    def __init__(self, sim: Simulator, node_id: int, layout: Layout, *,
                 role: str = "primary", has_nvm: bool = True, track_uaf: bool = False):
        if role not in ("primary", "mirror"):
            raise ConfigError(f"unknown role {role!r}")
        self.sim = sim
        self.id = node_id
        self.layout = layout
        self.role = role
        self.has_nvm = has_nvm
        self.track_uaf = track_uaf
        self.mirrors: list[MirrorLink] = []
        self.dropped_mirrors: list[int] = []
        self.deferred: list[tuple[int, list[int]]] = []
        self.stats = BackendStats()
        self._wake = Signal(sim)
        self._applying: set[int] = set()
        self._mb_seen: dict[int, int] = {}
        self._task = None
        sim.node(node_id).handler = self

    # -- construction ----------------------------------------------------

    @property
    def region(self) -> bytearray:
        return self.sim.node(self.id).region

    @classmethod
    def format(cls, sim: Simulator, node_id: int, **plan_kw) -> "BackendNode":
        """Lay out a fresh region on ``node_id`` (which must have one)."""
        region = sim.node(node_id).region
        if region is None:
            raise ConfigError(f"node {node_id} has no NVM region")
        role = plan_kw.pop("role", "primary")
        has_nvm = plan_kw.pop("has_nvm", True)
        track_uaf = plan_kw.pop("track_uaf", False)
        layout = Layout.plan(len(region), **plan_kw)
        region[:] = bytes(len(region))
        region[0:len(layout.pack())] = layout.pack()
        for slot in range(layout.n_fe):
            d = layout.desc_off(slot)
            log_off, log_len = layout.log_area(slot)
            write_u64(region, d + D_LOG_OFF, log_off)
            write_u64(region, d + D_LOG_LEN, log_len)
            write_u64(region, d + D_OPLOG_OFF, layout.oplog_area(slot))
            write_u64(region, d + D_OPLOG_SLOTS, layout.oplog_slots)
            write_u64(region, d + D_MBOX_REQ, d + DESC_FIXED)
            write_u64(region, d + D_MBOX_RESP, d + DESC_FIXED + MBOX_SLOT)
            write_u64(region, d + D_LOCK_AHEAD, d + DESC_FIXED + 2 * MBOX_SLOT)
        node = cls(sim, node_id, layout, role=role, has_nvm=has_nvm, track_uaf=track_uaf)
        for b in range(layout.root_blocks):
            node._set_bit(b)
        return node

    @classmethod
    def open(cls, sim: Simulator, node_id: int, **kw) -> "BackendNode":
        """Reattach to a formatted region after a restart.

        Only reconstructs the mapping; the caller decides how to recover the
        logs (see the recovery module).
        """
        layout = Layout.unpack(sim.node(node_id).region)
        return cls(sim, node_id, layout, **kw)

    def start(self) -> None:
        """Start the background replay service."""
        if self._task is None or self._task.done or self._task.killed:
            self._task = self.sim.spawn(self._service, node=self.id, name=f"replay@{self.id}")

    # -- front-end slots -------------------------------------------------

    def attach(self, fe: int) -> int:
        """Bind front-end ``fe`` to a descriptor slot (administrative step)."""
        free = None
        for slot in range(self.layout.n_fe):
            owner = read_u64(self.region, self.layout.desc_off(slot) + D_OWNER)
            if owner == fe + 1:
                return slot
            if owner == 0 and free is None:
                free = slot
        if free is None:
            raise ConfigError("no free front-end slot")
        write_u64(self.region, self.layout.desc_off(free) + D_OWNER, fe + 1)
        self._replicate_local(self.layout.desc_off(free), 8)
        return free

    def slot_of(self, fe: int) -> int | None:
        for slot in range(self.layout.n_fe):
            if read_u64(self.region, self.layout.desc_off(slot) + D_OWNER) == fe + 1:
                return slot
        return None

    def owned_slots(self) -> list[int]:
        return [s for s in range(self.layout.n_fe)
                if read_u64(self.region, self.layout.desc_off(s) + D_OWNER)]

    def owner_of_slot(self, slot: int) -> int | None:
        v = read_u64(self.region, self.layout.desc_off(slot) + D_OWNER)
        return v - 1 if v else None

    def cursor(self, slot: int) -> tuple[int, int]:
        return unpack_cursor(read_u64(self.region, self.layout.desc_off(slot) + D_CURSOR))

    def opn(self, slot: int) -> int:
        return read_u64(self.region, self.layout.desc_off(slot) + D_OPN)

    def lock_ahead(self, slot: int, index: int) -> int:
        base = read_u64(self.region, self.layout.desc_off(slot) + D_LOCK_AHEAD)
        return read_u64(self.region, base + 8 * index)

    # -- sequence number -------------------------------------------------

    @property
    def seqno(self) -> int:
        return read_u64(self.region, self.layout.seqno_off)

    def seqno_bump(self) -> int:
        value = self.seqno + 1
        write_u64(self.region, self.layout.seqno_off, value)
        return value

    # -- allocation bitmap -----------------------------------------------

    def _bit(self, block: int) -> bool:
        return bool(self.region[self.layout.bitmap_off + block // 8] >> (block % 8) & 1)

    def _set_bit(self, block: int) -> None:
        self.region[self.layout.bitmap_off + block // 8] |= 1 << (block % 8)

    def _clear_bit(self, block: int) -> None:
        self.region[self.layout.bitmap_off + block // 8] &= ~(1 << (block % 8)) & 0xFF

    def is_allocated(self, addr: int) -> bool:
        return self._bit(self.layout.block_of(addr))

    def allocated_blocks(self) -> list[int]:
        """Addresses of every allocated block, root-table blocks included."""
        lay = self.layout
        out = []
        bm = self.region[lay.bitmap_off:lay.bitmap_off + (lay.n_blocks + 7) // 8]
        for i, byte in enumerate(bm):
            if byte:
                for j in range(8):
                    if byte >> j & 1 and i * 8 + j < lay.n_blocks:
                        out.append(lay.block_addr(i * 8 + j))
        return out

    def free_block_count(self) -> int:
        return self.layout.n_blocks - len(self.allocated_blocks())

    def malloc(self, n: int, contiguous: bool = False) -> list[int] | None:
        """Lowest-free-first allocation; None (and no change) when out of memory."""
        lay = self.layout
        if n <= 0:
            return []
        picked: list[int] = []
        run_start, run_len = 0, 0
        for b in range(lay.root_blocks, lay.n_blocks):
            if self._bit(b):
                run_len = 0
                continue
            if contiguous:
                if run_len == 0:
                    run_start = b
                run_len += 1
                if run_len == n:
                    picked = list(range(run_start, run_start + n))
                    break
            else:
                picked.append(b)
                if len(picked) == n:
                    break
        if len(picked) < n:
            return None
        for b in picked:
            self._set_bit(b)
        self._replicate_bitmap(picked)
        return [lay.block_addr(b) for b in picked]

    def free(self, addrs: list[int]) -> int:
        """Clear bits; returns how many were already clear (double frees)."""
        doubles = 0
        touched = []
        for a in addrs:
            b = self.layout.block_of(a)
            if not (self.layout.root_blocks <= b < self.layout.n_blocks) or not self._bit(b):
                doubles += 1
                continue
            self._clear_bit(b)
            touched.append(b)
        self._replicate_bitmap(touched)
        self.stats.double_frees += doubles
        return doubles

    def deferred_free(self, addrs: list[int], delay_us: int) -> None:
        if delay_us <= 0:
            self.free(addrs)
            return
        due = self.sim.now + delay_us * 1000
        entry = (due, list(addrs))
        self.deferred.append(entry)
        self.sim.call_at(due, self._deferred_due, entry, node=self.id)

    def _deferred_due(self, entry) -> None:
        if entry in self.deferred:
            self.deferred.remove(entry)
            self.free(entry[1])

    def pending_deferred(self) -> set[int]:
        return {a for _, addrs in self.deferred for a in addrs}

    # -- fabric hooks ----------------------------------------------------

    def on_write(self, addr: int, length: int, src: int) -> int:
        lay = self.layout
        if self._replicated_range(addr, length):
            self._replicate_local(addr, length)
        if lay.log_areas_off <= addr < lay.oplog_areas_off:
            self._wake.fire()
            return 0
        if self.role == "primary" and lay.desc_table_off <= addr < lay.desc_table_off + lay.n_fe * lay.desc_size:
            slot, rel = divmod(addr - lay.desc_table_off, lay.desc_size)
            if DESC_FIXED <= rel < DESC_FIXED + MBOX_SLOT:
                self._serve_mailbox(slot)
        return 0

    def on_read(self, addr: int, length: int, src: int) -> None:
        if not self.track_uaf or not self.layout.in_data(addr, length):
            return
        lay = self.layout
        first = lay.block_of(addr)
        last = lay.block_of(addr + max(length, 1) - 1)
        for b in range(first, last + 1):
            if not self._bit(b):
                self.stats.uaf_reads.append((self.sim.now, src, lay.block_addr(b)))

    # -- mailbox ---------------------------------------------------------

    def _serve_mailbox(self, slot: int) -> None:
        d = self.layout.desc_off(slot)
        req = d + DESC_FIXED
        seq, op, n = MB_HDR.unpack_from(self.region, req)
        if seq == 0 or self._mb_seen.get(slot) == seq:
            return
        resp_seq = MB_HDR.unpack_from(self.region, d + DESC_FIXED + MBOX_SLOT)[0]
        if resp_seq == seq:  # answered before a restart
            self._mb_seen[slot] = seq
            return
        if n > MB_MAX_ARGS:
            self._respond(slot, seq, ST_BAD, [])
            return
        args = list(struct.unpack_from(f"<{n}Q", self.region, req + MB_HDR.size))
        self._mb_seen[slot] = seq
        self.stats.rpcs += 1
        status, values = ST_BAD, []
        if op == MB_MALLOC and len(args) == 2:
            count, contiguous = args
            if contiguous or count <= MB_MAX_ARGS:
                got = self.malloc(count, bool(contiguous))
                if got is None:
                    status = ST_OOM
                else:
                    status, values = ST_OK, (got[:1] if contiguous else got)
        elif op == MB_FREE:
            status = ST_DOUBLE_FREE if self.free(args) else ST_OK
        elif op == MB_DEFERRED_FREE and args:
            delay, blocks = args[0], args[1:]
            doubles = [a for a in blocks if not self.is_allocated(a)]
            self.deferred_free([a for a in blocks if a not in doubles], delay)
            status = ST_DOUBLE_FREE if doubles else ST_OK
        self._respond(slot, seq, status, values)

    def _respond(self, slot: int, seq: int, status: int, values: list[int]) -> None:
        resp = self.layout.desc_off(slot) + DESC_FIXED + MBOX_SLOT
        MB_HDR.pack_into(self.region, resp + 0, 0, status, len(values))
        struct.pack_into(f"<{len(values)}Q", self.region, resp + MB_HDR.size, *values)
        write_u64(self.region, resp, seq)  # publish last

    # -- mirrors ---------------------------------------------------------

    def attach_mirror(self, mirror: "BackendNode") -> None:
        """Seed ``mirror`` with a copy of this region and start forwarding."""
        mirror.region[:] = self.region
        self.mirrors.append(MirrorLink(mirror.id, mirror.has_nvm))

    def _replicated_range(self, addr: int, length: int) -> bool:
        if not self.mirrors or self.role != "primary":
            return False
        lay = self.layout
        if lay.log_areas_off <= addr < lay.data_off:
            return True  # memory-log and operation-log areas
        return lay.ds_table_off <= addr < lay.desc_table_off

    def _replicate_local(self, addr: int, length: int) -> None:
        if not self.mirrors or self.role != "primary":
            return
        data = bytes(self.region[addr:addr + length])
        for link in list(self.mirrors):
            try:
                self.sim.write(self.id, link.node, addr, data)
                self.stats.replicated_writes += 1
            except NodeCrashed as exc:
                if exc.node == self.id:
                    raise DestinationUnreachable(self.id) from None
                raise
            except DestinationUnreachable:
                self.mirrors.remove(link)
                self.dropped_mirrors.append(link.node)
                self.sim.local_log.append(("mirror-dropped", self.sim.now, self.id, link.node))

    def _replicate_bitmap(self, blocks: list[int]) -> None:
        if not blocks or not self.mirrors:
            return
        lo, hi = min(blocks) // 8, max(blocks) // 8
        self._replicate_local(self.layout.bitmap_off + lo, hi - lo + 1)

    # -- log replay ------------------------------------------------------

    def _slot_area(self, slot: int) -> tuple[int, int]:
        d = self.layout.desc_off(slot)
        return read_u64(self.region, d + D_LOG_OFF), read_u64(self.region, d + D_LOG_LEN)

    def _locate(self, slot: int, lpn: int, head: int) -> tuple[int, RecordHeader] | None:
        """Find the record carrying ``lpn``: at ``head``, or at 0 after a wrap."""
        log_off, log_len = self._slot_area(slot)
        limit = log_off + log_len
        hdr = peek_header(self.region, log_off + head, limit)
        if hdr is not None and hdr.seq == lpn:
            return head, hdr
        if head != 0:
            # a wrapped record may be longer than head and cover it
            hdr = peek_header(self.region, log_off, limit)
            if hdr is not None and hdr.seq == lpn and head + hdr.total > log_len:
                return 0, hdr
        return None

    def next_record(self, slot: int) -> tuple[int, RecordHeader] | None:
        """The committed record at the slot's LPN, if it is complete and valid."""
        lpn, head = self.cursor(slot)
        found = self._locate(slot, lpn, head)
        if found is None:
            return None
        pos, hdr = found
        log_off, _ = self._slot_area(slot)
        if not record_valid(self.region, log_off + pos, hdr):
            return None
        return pos, hdr

    def resolve_entry(self, slot: int, e: DecodedEntry) -> bytes:
        if e.flag != FLAG_OPREF:
            return e.payload
        ref = read_u64(e.payload, 0)
        opn, poff = unpack_opref(ref)
        d = self.layout.desc_off(slot)
        base = read_u64(self.region, d + D_OPLOG_OFF)
        nslots = read_u64(self.region, d + D_OPLOG_SLOTS)
        op = OpLogEntry.decode(self.region, base + (opn % nslots) * OPLOG_SLOT)
        if op is None or op.opn != opn or poff + e.length > len(op.params):
            raise ChecksumMismatch(f"operation log {opn} does not back a memory-log entry")
        return op.params[poff:poff + e.length]

    def _apply_entries(self, slot: int, entries: list[DecodedEntry], timed: bool) -> None:
        for e in entries:
            data = self.resolve_entry(slot, e)
            if timed:
                self.sim.sleep(self.sim.latency.nvm_write_ns)
            if self.has_nvm:
                self.region[e.address:e.address + e.length] = data
            else:
                self.sim.node(self.id).disk.append((e.address, bytes(data)))
            self.stats.entries_applied += 1

    def _apply_record(self, slot: int, pos: int, hdr: RecordHeader, timed: bool) -> None:
        log_off, log_len = self._slot_area(slot)
        entries = decode_entries(self.region, log_off + pos, hdr)
        # check everything up front: a bad entry must not leave SN odd
        for e in entries:
            self.resolve_entry(slot, e)
            if not self.layout.in_data(e.address, e.length):
                raise ChecksumMismatch(f"entry address {e.address} outside the data area")
        self._applying.add(slot)
        try:
            if self.has_nvm:
                self.seqno_bump()
            self.sim.local_log.append(("apply-begin", self.sim.now, self.id, slot, hdr.seq))
            self._apply_entries(slot, entries, timed)
            d = self.layout.desc_off(slot)
            if hdr.opn_hi > self.opn(slot):
                write_u64(self.region, d + D_OPN, hdr.opn_hi)
            end = pos + hdr.total
            write_u64(self.region, d + D_CURSOR, pack_cursor(hdr.seq + 1, 0 if end >= log_len else end))
            self.region[log_off + pos:log_off + end] = bytes(hdr.total)
            if self.has_nvm:
                self.seqno_bump()
            self.sim.local_log.append(("apply-end", self.sim.now, self.id, slot, hdr.seq))
            self.stats.records_applied += 1
        finally:
            self._applying.discard(slot)

    def replay_step(self) -> int:
        """Apply every committed record now, without charging time."""
        applied = 0
        progress = True
        while progress:
            progress = False
            for slot in range(self.layout.n_fe):
                if slot in self._applying:
                    continue
                rec = self.next_record(slot)
                if rec is not None:
                    self._apply_record(slot, *rec, timed=False)
                    applied += 1
                    progress = True
        return applied

    def _service(self) -> None:
        while True:
            progress = False
            for slot in range(self.layout.n_fe):
                if slot in self._applying:
                    continue
                rec = self.next_record(slot)
                if rec is not None:
                    self._apply_record(slot, *rec, timed=True)
                    progress = True
            if not progress:
                self._wake.wait()

    def quiescent(self) -> bool:
        return not self._applying and all(self.next_record(s) is None for s in range(self.layout.n_fe))

    # -- validation ------------------------------------------------------

    def validate_slot(self, slot: int) -> SlotValidation:
        """Walk the valid chain from LPN and inspect what follows it."""
        lpn, head = self.cursor(slot)
        log_off, log_len = self._slot_area(slot)
        seq, pos, count = lpn, head, 0
        wrapped = False
        while True:
            found = self._locate_at(slot, seq, pos, wrapped)
            if found is None:
                break
            p, hdr = found
            if not record_valid(self.region, log_off + p, hdr):
                return SlotValidation(slot, TxState.INCONSISTENT, count, lpn)
            wrapped = wrapped or p < pos
            count += 1
            seq += 1
            pos = p + hdr.total
            if pos >= log_len:
                pos, wrapped = 0, True
        if not _is_zero(self.region, log_off, log_len) and self._garbage_after(slot, pos, head, count):
            return SlotValidation(slot, TxState.INCONSISTENT, count, lpn)
        return SlotValidation(slot, TxState.CONSISTENT if count else TxState.EMPTY, count, lpn)

    def _locate_at(self, slot: int, seq: int, pos: int, wrapped: bool):
        log_off, log_len = self._slot_area(slot)
        limit = log_off + log_len
        hdr = peek_header(self.region, log_off + pos, limit)
        if hdr is not None and hdr.seq == seq:
            return pos, hdr
        if pos != 0 and not wrapped:
            hdr = peek_header(self.region, log_off, limit)
            if hdr is not None and hdr.seq == seq and pos + hdr.total > log_len:
                return 0, hdr
        return None

    def _garbage_after(self, slot: int, pos: int, head: int, count: int) -> bool:
        """True when bytes outside the valid chain are non-zero."""
        log_off, log_len = self._slot_area(slot)
        live = []
        seq, p = self.cursor(slot)
        wrapped = False
        for _ in range(count):
            q, hdr = self._locate_at(slot, seq, p, wrapped)
            wrapped = wrapped or q < p
            live.append((q, q + hdr.total))
            seq += 1
            p = q + hdr.total
            if p >= log_len:
                p, wrapped = 0, True
        cur = 0
        for a, b in sorted(live) + [(log_len, log_len)]:
            if a > cur and not _is_zero(self.region, log_off + cur, a - cur):
                return True
            cur = max(cur, b)
        return False

    def validate_last_tx(self, slot: int | None = None) -> TxState:
        """Empty / Consistent / Inconsistent for one slot, or the worst over all."""
        if slot is not None:
            return self.validate_slot(slot).state
        states = [self.validate_slot(s).state for s in range(self.layout.n_fe)]
        if TxState.INCONSISTENT in states:
            return TxState.INCONSISTENT
        return TxState.CONSISTENT if TxState.CONSISTENT in states else TxState.EMPTY

    def discard_log_tail(self, slot: int) -> int:
        """Zero everything left in a slot's log area (after replaying the valid chain)."""
        log_off, log_len = self._slot_area(slot)
        dirty = log_len - bytes(self.region[log_off:log_off + log_len]).count(0)
        self.region[log_off:log_off + log_len] = bytes(log_len)
        return dirty

    def fix_seqno_parity(self) -> bool:
        if self.seqno % 2:
            self.seqno_bump()
            return True
        return False

    # -- snapshots -------------------------------------------------------

    def dump_region(self, path: str | Path) -> None:
        Path(path).write_bytes(bytes(self.region))

    @staticmethod
    def load_region(sim: Simulator, node_id: int, path: str | Path) -> None:
        data = Path(path).read_bytes()
        region = sim.node(node_id).region
        if region is None or len(region) != len(data):
            raise ConfigError("snapshot size does not match the node's region")
        region[:] = data
        if data[:8] != bytes(HEADER_SIZE)[:8]:
            Layout.unpack(region)  # validates the magic


def _is_zero(buf, off: int, n: int) -> bool:
    return n <= 0 or buf[off:off + n] == bytes(n)
