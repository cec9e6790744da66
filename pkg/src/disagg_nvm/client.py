"""Front-end side of the fixed back-end API.

A :class:`BackendClient` is one front-end's view of one back-end: it appends
transaction records to the front-end's log area, writes operation-log slots,
talks to the allocation mailbox and wraps the atomic verbs. Everything goes
through fabric verbs; nothing here touches the back-end's memory directly.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass

from .backend import (
    MB_DEFERRED_FREE,
    MB_FREE,
    MB_HDR,
    MB_MALLOC,
    MB_MAX_ARGS,
    ST_DOUBLE_FREE,
    ST_OK,
    ST_OOM,
)
from .errors import ConfigError, DoubleFree, LogAreaFull, NvmError, OutOfMemory
from .fabric import Simulator
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
    HEADER_SIZE,
    MBOX_SLOT,
    OPLOG_SLOT,
    Layout,
    LogEntry,
    OpLogEntry,
    encode_record,
    read_u64,
    record_size,
    unpack_cursor,
)

DEFAULT_VERB_CAP = 4096
POLL_NS = 1000


@dataclass
class _Outstanding:
    seq: int
    pos: int
    total: int
    body: bytes
    trailer: bytes


class BackendClient:
    def __init__(self, sim: Simulator, fe: int, be: int, *, verb_cap: int = DEFAULT_VERB_CAP,
                 separate_commit: bool = False, poll_ns: int = POLL_NS):
        if verb_cap < 64:
            raise ConfigError("verb_cap must be >= 64")
        self.sim = sim
        self.fe = fe
        self.be = be
        self.verb_cap = verb_cap
        self.separate_commit = separate_commit
        self.poll_ns = poll_ns
        self.layout: Layout | None = None
        self.slot = -1
        self.outstanding: deque[_Outstanding] = deque()
        self.records_written = 0
        self.oplogs_written = 0
        self.rpcs = 0

    # -- discovery -------------------------------------------------------

    def connect(self) -> "BackendClient":
        """Read the naming area and find this front-end's descriptor."""
        lay = Layout.unpack(self.sim.read(self.fe, self.be, 0, HEADER_SIZE))
        table = self.sim.read(self.fe, self.be, lay.desc_table_off, lay.n_fe * lay.desc_size)
        for slot in range(lay.n_fe):
            if read_u64(table, slot * lay.desc_size + D_OWNER) == self.fe + 1:
                break
        else:
            raise ConfigError(f"front-end {self.fe} is not attached to back-end {self.be}")
        d = slot * lay.desc_size
        self.layout = lay
        self.slot = slot
        self.desc = lay.desc_off(slot)
        self.log_off = read_u64(table, d + D_LOG_OFF)
        self.log_len = read_u64(table, d + D_LOG_LEN)
        self.oplog_off = read_u64(table, d + D_OPLOG_OFF)
        self.oplog_slots = read_u64(table, d + D_OPLOG_SLOTS)
        self.mbox_req = read_u64(table, d + D_MBOX_REQ)
        self.mbox_resp = read_u64(table, d + D_MBOX_RESP)
        self.la_off = read_u64(table, d + D_LOCK_AHEAD)
        lpn, head = unpack_cursor(read_u64(table, d + D_CURSOR))
        self.next_seq = self.lpn_seen = lpn
        self.tail = head
        self.next_opn = self.opn_seen = read_u64(table, d + D_OPN)
        self.mb_seq = read_u64(table, d + DESC_FIXED + MBOX_SLOT)
        self.outstanding.clear()
        return self

    # -- atomics and raw verbs -------------------------------------------

    def read(self, addr: int, length: int) -> bytes:
        return self.sim.read(self.fe, self.be, addr, length)

    def cas(self, addr: int, expected: int, swap: int) -> int:
        return self.sim.cas64(self.fe, self.be, addr, expected, swap)

    def atomic_read(self, addr: int) -> int:
        return self.sim.atomic_read64(self.fe, self.be, addr)

    def write_lock_ahead(self, index: int, word: int) -> None:
        self.sim.write(self.fe, self.be, self.la_off + 8 * index, struct.pack("<Q", word))

    def read_seqno(self) -> int:
        return self.atomic_read(self.layout.seqno_off)

    # -- log cursor ------------------------------------------------------

    def refresh_cursor(self) -> int:
        lpn, _ = unpack_cursor(self.atomic_read(self.desc + D_CURSOR))
        while self.outstanding and self.outstanding[0].seq < lpn:
            self.outstanding.popleft()
        self.lpn_seen = lpn
        return lpn

    def refresh_opn(self) -> int:
        self.opn_seen = self.atomic_read(self.desc + D_OPN)
        return self.opn_seen

    def _place(self, total: int) -> int | None:
        t = self.tail
        if not self.outstanding:
            return t if t + total <= self.log_len else 0
        h = self.outstanding[0].pos
        if t > h:
            if t + total <= self.log_len:
                return t
            return 0 if total <= h else None
        if t < h:
            return t if t + total <= h else None
        return None  # t == h with records outstanding: the area is full

    # -- transaction records ---------------------------------------------

    def remote_tx_write(self, entries: list[LogEntry], opn_hi: int = 0, *,
                        wait_applied: bool = False) -> int:
        """Append one committed record; returns its sequence number."""
        body, trailer = encode_record(self.next_seq, opn_hi, entries)
        total = record_size(len(body))
        if total > self.log_len:
            raise LogAreaFull(f"record of {total} B exceeds the {self.log_len} B log area")
        pos = self._place(total)
        while pos is None:
            self.refresh_cursor()
            pos = self._place(total)
            if pos is None:
                self.sim.sleep(self.poll_ns)
        rec = _Outstanding(self.next_seq, pos, total, body, trailer)
        self.outstanding.append(rec)
        self.next_seq += 1
        end = pos + total
        self.tail = 0 if end >= self.log_len else end
        self._send(rec)
        if wait_applied:
            while self.refresh_cursor() <= rec.seq:
                self.sim.sleep(self.poll_ns)
        return rec.seq

    def _send(self, rec: _Outstanding) -> None:
        base = self.log_off + rec.pos
        data = rec.body if self.separate_commit else rec.body + rec.trailer
        for off in range(0, len(data), self.verb_cap):
            self.sim.write(self.fe, self.be, base + off, data[off:off + self.verb_cap])
        if self.separate_commit:
            self.sim.write(self.fe, self.be, base + len(rec.body), rec.trailer)
        self.records_written += 1

    def resend_unapplied(self) -> int:
        """After the back-end restarts, write again every record it has not applied."""
        self.refresh_cursor()
        for rec in self.outstanding:
            self._send(rec)
        return len(self.outstanding)

    def wait_applied(self, seq: int | None = None) -> None:
        target = self.next_seq - 1 if seq is None else seq
        while self.lpn_seen <= target:
            if self.refresh_cursor() > target:
                break
            self.sim.sleep(self.poll_ns)

    # -- operation log ---------------------------------------------------

    def op_log_write(self, opcode: int, ds_id: int, params: bytes) -> int:
        opn = self.next_opn
        while opn - self.opn_seen >= self.oplog_slots:
            if opn - self.refresh_opn() < self.oplog_slots:
                break
            self.sim.sleep(self.poll_ns)
        slot = self.oplog_off + (opn % self.oplog_slots) * OPLOG_SLOT
        self.sim.write(self.fe, self.be, slot, OpLogEntry(opcode, ds_id, opn, params).encode())
        self.next_opn = opn + 1
        self.oplogs_written += 1
        return opn

    def read_oplog(self, opn: int) -> OpLogEntry | None:
        raw = self.read(self.oplog_off + (opn % self.oplog_slots) * OPLOG_SLOT, OPLOG_SLOT)
        op = OpLogEntry.decode(raw)
        return op if op is not None and op.opn == opn else None

    # -- mailbox ---------------------------------------------------------

    def rpc(self, op: int, args: list[int]) -> tuple[int, list[int]]:
        if len(args) > MB_MAX_ARGS:
            raise ValueError("too many mailbox arguments")
        self.mb_seq += 1
        seq = self.mb_seq
        req = MB_HDR.pack(seq, op, len(args)) + struct.pack(f"<{len(args)}Q", *args)
        self.sim.write(self.fe, self.be, self.mbox_req, req)
        self.rpcs += 1
        while True:
            self.sim.sleep(self.poll_ns)
            raw = self.read(self.mbox_resp, MBOX_SLOT)
            rseq, status, n = MB_HDR.unpack_from(raw, 0)
            if rseq == seq:
                return status, list(struct.unpack_from(f"<{n}Q", raw, MB_HDR.size))

    def malloc(self, n: int = 1, contiguous: bool = False) -> list[int]:
        """Allocate ``n`` blocks; a contiguous request returns only the first address."""
        if not contiguous and n > MB_MAX_ARGS:
            out = []
            while len(out) < n:
                out += self.malloc(min(MB_MAX_ARGS, n - len(out)))
            return out
        status, values = self.rpc(MB_MALLOC, [n, int(contiguous)])
        if status == ST_OOM:
            raise OutOfMemory(f"back-end {self.be} cannot supply {n} blocks")
        if status != ST_OK:
            raise NvmError(f"malloc failed with status {status}")
        return values

    def free(self, addrs: list[int]) -> None:
        self._free(MB_FREE, [], addrs)

    def deferred_free(self, addrs: list[int], delay_us: int) -> None:
        self._free(MB_DEFERRED_FREE, [delay_us], addrs)

    def _free(self, op: int, prefix: list[int], addrs: list[int]) -> None:
        doubles = False
        step = MB_MAX_ARGS - len(prefix)
        for i in range(0, len(addrs), step):
            status, _ = self.rpc(op, prefix + list(addrs[i:i + step]))
            doubles |= status == ST_DOUBLE_FREE
        if doubles:
            raise DoubleFree("one or more blocks were already free")
