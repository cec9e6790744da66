"""Bit-exact byte layouts of the persistent region.

Everything is little-endian and fixed width. A region looks like::

    0        NamingArea header (256 B, starts with MAGIC)
    256      sequence number word (8 B)
    264      lock table            n_locks x 8 B
    ...      data-structure table  n_ds x 32 B
    ...      front-end descriptors n_fe x desc_size
    ...      allocation bitmap     ceil(n_blocks / 8) B
    ...      memory-log areas      n_fe x log_len
    ...      operation-log areas   n_fe x oplog_slots x 64 B
    data_off data area             n_blocks x block_size (block aligned)

The first blocks of the data area hold the root table (32 B anchor per
data-structure partition); they are marked allocated at format time.

Descriptor (one per front-end slot, offsets relative to the descriptor)::

    0   owner       u64  node id + 1, 0 when the slot is free
    8   log_off     u64
    16  log_len     u64
    24  oplog_off   u64
    32  oplog_slots u64
    40  cursor      u64  (lpn << 32) | head physical offset inside the log area
    48  opn         u64  operations whose memory logs are applied
    56  mbox_req    u64  offset of the 256 B request slot
    64  mbox_resp   u64  offset of the 256 B response slot
    72  lock_ahead  u64  offset of the lock-ahead table (n_locks x 8 B)

Memory-log entry::

    flag u8 | address u64 | length u32 | payload (length B, or 8 B reference)

Transaction record::

    magic u16 = 0x5854 | kind u8 | pad u8 | seq u64 | opn_hi u64
    | n_entries u32 | body_len u32 | entries (body_len B)
    | commit u8 = 0xC5 | crc32c u32 over everything before it

Records start 8-byte aligned and never straddle the end of a log area.

Operation-log slot (64 B, slot index = opn mod oplog_slots)::

    opcode u16 | ds_id u32 | param_len u16 | opn u64 | params (<= 44 B)
    | zero pad | crc32c u32 over bytes [0, 60)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields

from crc32c import crc32c

MAGIC = b"DNVMRG01"
VERSION = 1
HEADER_SIZE = 256

# descriptor field offsets
D_OWNER = 0
D_LOG_OFF = 8
D_LOG_LEN = 16
D_OPLOG_OFF = 24
D_OPLOG_SLOTS = 32
D_CURSOR = 40
D_OPN = 48
D_MBOX_REQ = 56
D_MBOX_RESP = 64
D_LOCK_AHEAD = 72
DESC_FIXED = 80
MBOX_SLOT = 256

ROOT_SLOT_SIZE = 32
DS_ENTRY_SIZE = 32

ENTRY_HDR = struct.Struct("<BQI")  # flag, address, length
REC_HDR = struct.Struct("<HBBQQII")  # magic, kind, pad, seq, opn_hi, n_entries, body_len
REC_MAGIC = 0x5854
REC_TRAILER = struct.Struct("<BI")  # commit mark, checksum
COMMIT_MARK = 0xC5

OPLOG_SLOT = 64
OPLOG_HDR = struct.Struct("<HIHQ")  # opcode, ds_id, param_len, opn
OPLOG_PARAMS_MAX = OPLOG_SLOT - OPLOG_HDR.size - 4

FLAG_INLINE = 0
FLAG_OPREF = 1

U64 = struct.Struct("<Q")

LOCK_UNLOCKED = 0
LA_ACQUIRE = 1
LA_RELEASE = 2


def align(n: int, a: int) -> int:
    return (n + a - 1) // a * a


def checksum(data) -> int:
    return crc32c(bytes(data))


def read_u64(buf, off: int) -> int:
    return U64.unpack_from(buf, off)[0]


def write_u64(buf, off: int, value: int) -> None:
    U64.pack_into(buf, off, value & 0xFFFFFFFFFFFFFFFF)


def pack_cursor(lpn: int, head: int) -> int:
    return (lpn << 32) | head


def unpack_cursor(word: int) -> tuple[int, int]:
    return word >> 32, word & 0xFFFFFFFF


def lock_word_for(owner: int) -> int:
    return owner + 1


def lock_owner(word: int) -> int | None:
    return None if word == LOCK_UNLOCKED else word - 1


def lock_ahead_word(session: int, intent: int) -> int:
    return (session << 2) | intent


def opref(opn: int, param_offset: int) -> int:
    return (opn << 8) | param_offset


def unpack_opref(ref: int) -> tuple[int, int]:
    return ref >> 8, ref & 0xFF


_HEADER_FMT = struct.Struct("<8sIIQIIQQQQQIIQQQQIIIIQQ")


@dataclass(frozen=True)
class Layout:
    capacity: int
    n_fe: int
    block_size: int
    n_blocks: int
    bitmap_off: int
    data_off: int
    data_len: int
    seqno_off: int
    lock_table_off: int
    n_locks: int
    n_ds: int
    ds_table_off: int
    desc_table_off: int
    desc_size: int
    root_table_addr: int
    root_slots: int
    log_len: int
    oplog_slots: int
    oplog_slot_size: int
    root_blocks: int
    log_areas_off: int
    oplog_areas_off: int

    @classmethod
    def plan(
        cls,
        capacity: int,
        *,
        n_fe: int = 8,
        block_size: int = 1024,
        log_len: int = 64 * 1024,
        oplog_slots: int = 2048,
        n_locks: int = 128,
        n_ds: int = 32,
        root_slots: int = 128,
    ) -> "Layout":
        if block_size % 8 or block_size < 32:
            raise ValueError("block_size must be a multiple of 8 and >= 32")
        if log_len % 8:
            raise ValueError("log_len must be a multiple of 8")
        seqno_off = HEADER_SIZE
        lock_table_off = seqno_off + 8
        ds_table_off = align(lock_table_off + 8 * n_locks, 64)
        desc_size = align(DESC_FIXED + 2 * MBOX_SLOT + 8 * n_locks, 64)
        desc_table_off = align(ds_table_off + DS_ENTRY_SIZE * n_ds, 64)
        bitmap_off = align(desc_table_off + desc_size * n_fe, 64)
        bitmap_max = align((capacity // block_size + 7) // 8, 64)
        log_areas_off = align(bitmap_off + bitmap_max, 64)
        oplog_areas_off = log_areas_off + n_fe * log_len
        data_off = align(oplog_areas_off + n_fe * oplog_slots * OPLOG_SLOT, block_size)
        if data_off >= capacity:
            raise ValueError("capacity too small for metadata")
        n_blocks = (capacity - data_off) // block_size
        root_blocks = align(root_slots * ROOT_SLOT_SIZE, block_size) // block_size
        if n_blocks <= root_blocks:
            raise ValueError("capacity too small for the data area")
        return cls(
            capacity=capacity,
            n_fe=n_fe,
            block_size=block_size,
            n_blocks=n_blocks,
            bitmap_off=bitmap_off,
            data_off=data_off,
            data_len=n_blocks * block_size,
            seqno_off=seqno_off,
            lock_table_off=lock_table_off,
            n_locks=n_locks,
            n_ds=n_ds,
            ds_table_off=ds_table_off,
            desc_table_off=desc_table_off,
            desc_size=desc_size,
            root_table_addr=data_off,
            root_slots=root_slots,
            log_len=log_len,
            oplog_slots=oplog_slots,
            oplog_slot_size=OPLOG_SLOT,
            root_blocks=root_blocks,
            log_areas_off=log_areas_off,
            oplog_areas_off=oplog_areas_off,
        )

    def pack(self) -> bytes:
        return _HEADER_FMT.pack(
            MAGIC, VERSION, self.n_fe, self.capacity, self.block_size, self.n_blocks,
            self.bitmap_off, self.data_off, self.data_len, self.seqno_off,
            self.lock_table_off, self.n_locks, self.n_ds, self.ds_table_off,
            self.desc_table_off, self.desc_size, self.root_table_addr,
            self.root_slots, self.log_len, self.oplog_slots, self.oplog_slot_size,
            self.log_areas_off, self.oplog_areas_off,
        )

    @classmethod
    def unpack(cls, buf) -> "Layout":
        vals = _HEADER_FMT.unpack_from(buf, 0)
        if vals[0] != MAGIC:
            raise ValueError("region is not formatted (bad magic)")
        if vals[1] != VERSION:
            raise ValueError(f"unsupported layout version {vals[1]}")
        (_, _, n_fe, capacity, block_size, n_blocks, bitmap_off, data_off, data_len,
         seqno_off, lock_table_off, n_locks, n_ds, ds_table_off, desc_table_off,
         desc_size, root_table_addr, root_slots, log_len, oplog_slots, oplog_slot_size,
         log_areas_off, oplog_areas_off) = vals
        root_blocks = align(root_slots * ROOT_SLOT_SIZE, block_size) // block_size
        return cls(
            capacity=capacity, n_fe=n_fe, block_size=block_size, n_blocks=n_blocks,
            bitmap_off=bitmap_off, data_off=data_off, data_len=data_len,
            seqno_off=seqno_off, lock_table_off=lock_table_off, n_locks=n_locks,
            n_ds=n_ds, ds_table_off=ds_table_off, desc_table_off=desc_table_off,
            desc_size=desc_size, root_table_addr=root_table_addr, root_slots=root_slots,
            log_len=log_len, oplog_slots=oplog_slots, oplog_slot_size=oplog_slot_size,
            root_blocks=root_blocks, log_areas_off=log_areas_off,
            oplog_areas_off=oplog_areas_off,
        )

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    # -- addressing helpers --------------------------------------------------

    def desc_off(self, slot: int) -> int:
        return self.desc_table_off + slot * self.desc_size

    def log_area(self, slot: int) -> tuple[int, int]:
        return self.log_areas_off + slot * self.log_len, self.log_len

    def oplog_area(self, slot: int) -> int:
        return self.oplog_areas_off + slot * self.oplog_slots * OPLOG_SLOT

    def lock_addr(self, index: int) -> int:
        return self.lock_table_off + 8 * index

    def ds_entry_addr(self, index: int) -> int:
        return self.ds_table_off + DS_ENTRY_SIZE * index

    def root_addr(self, slot: int) -> int:
        return self.root_table_addr + ROOT_SLOT_SIZE * slot

    def block_addr(self, block: int) -> int:
        return self.data_off + block * self.block_size

    def block_of(self, addr: int) -> int:
        return (addr - self.data_off) // self.block_size

    def in_data(self, addr: int, length: int) -> bool:
        return self.data_off <= addr and addr + length <= self.data_off + self.data_len


# -- memory-log records ------------------------------------------------------


@dataclass
class LogEntry:
    """One redo entry. ``data`` always holds the bytes to apply; for FLAG_OPREF
    entries ``ref`` names the operation-log bytes that the encoding carries
    instead of the data."""

    address: int
    data: bytes
    ref: int | None = None

    @property
    def flag(self) -> int:
        return FLAG_OPREF if self.ref is not None else FLAG_INLINE

    def encoded_size(self) -> int:
        return ENTRY_HDR.size + (8 if self.ref is not None else len(self.data))

    def encode(self) -> bytes:
        if self.ref is not None:
            return ENTRY_HDR.pack(FLAG_OPREF, self.address, len(self.data)) + U64.pack(self.ref)
        return ENTRY_HDR.pack(FLAG_INLINE, self.address, len(self.data)) + bytes(self.data)


@dataclass
class DecodedEntry:
    flag: int
    address: int
    length: int
    payload: bytes  # data bytes, or the 8-byte reference for FLAG_OPREF


def encode_record(seq: int, opn_hi: int, entries: list[LogEntry], kind: int = 0) -> tuple[bytes, bytes]:
    """Return (body, trailer); body is header + entries, trailer commits it."""
    parts = [e.encode() for e in entries]
    payload = b"".join(parts)
    header = REC_HDR.pack(REC_MAGIC, kind, 0, seq, opn_hi, len(entries), len(payload))
    body = header + payload
    crc = checksum(body + bytes([COMMIT_MARK]))
    trailer = REC_TRAILER.pack(COMMIT_MARK, crc)
    return body, trailer


def record_size(body_len: int) -> int:
    return align(body_len + REC_TRAILER.size, 8)


@dataclass
class RecordHeader:
    kind: int
    seq: int
    opn_hi: int
    n_entries: int
    body_len: int

    @property
    def total(self) -> int:
        return record_size(REC_HDR.size + self.body_len)


def peek_header(buf, off: int, limit: int) -> RecordHeader | None:
    """Parse a record header at ``off`` if it is plausible within ``limit``."""
    if off + REC_HDR.size > limit:
        return None
    magic, kind, _pad, seq, opn_hi, n, body_len = REC_HDR.unpack_from(buf, off)
    if magic != REC_MAGIC:
        return None
    if off + REC_HDR.size + body_len + REC_TRAILER.size > limit:
        return None
    return RecordHeader(kind, seq, opn_hi, n, body_len)


def record_valid(buf, off: int, hdr: RecordHeader) -> bool:
    end = off + REC_HDR.size + hdr.body_len
    mark, crc = REC_TRAILER.unpack_from(buf, end)
    if mark != COMMIT_MARK:
        return False
    return checksum(buf[off:end] + bytes([COMMIT_MARK])) == crc


def decode_entries(buf, off: int, hdr: RecordHeader) -> list[DecodedEntry]:
    out = []
    pos = off + REC_HDR.size
    end = pos + hdr.body_len
    for _ in range(hdr.n_entries):
        flag, addr, length = ENTRY_HDR.unpack_from(buf, pos)
        pos += ENTRY_HDR.size
        n = 8 if flag == FLAG_OPREF else length
        out.append(DecodedEntry(flag, addr, length, bytes(buf[pos:pos + n])))
        pos += n
    if pos != end:
        raise ValueError("record body length mismatch")
    return out


# -- operation-log slots -----------------------------------------------------


@dataclass(frozen=True)
class OpLogEntry:
    opcode: int
    ds_id: int
    opn: int
    params: bytes

    def encode(self) -> bytes:
        if len(self.params) > OPLOG_PARAMS_MAX:
            raise ValueError("operation parameters too large for one slot")
        head = OPLOG_HDR.pack(self.opcode, self.ds_id, len(self.params), self.opn) + self.params
        head = head.ljust(OPLOG_SLOT - 4, b"\0")
        return head + struct.pack("<I", checksum(head))

    @classmethod
    def decode(cls, buf, off: int = 0) -> "OpLogEntry | None":
        raw = bytes(buf[off:off + OPLOG_SLOT])
        if len(raw) < OPLOG_SLOT:
            return None
        (crc,) = struct.unpack_from("<I", raw, OPLOG_SLOT - 4)
        if checksum(raw[:OPLOG_SLOT - 4]) != crc:
            return None
        opcode, ds_id, plen, opn = OPLOG_HDR.unpack_from(raw, 0)
        if plen > OPLOG_PARAMS_MAX:
            return None
        params = raw[OPLOG_HDR.size:OPLOG_HDR.size + plen]
        return cls(opcode, ds_id, opn, params)


OPLOG_PARAM_BASE = OPLOG_HDR.size


# -- data-structure table ----------------------------------------------------

_DS_FMT = struct.Struct("<IBBHIQI")  # ds_id+1, kind, n_parts, flags, root_slot, param, crc


@dataclass(frozen=True)
class DsEntry:
    ds_id: int
    kind: int
    n_parts: int
    root_slot: int
    param: int
    flags: int = 0

    def encode(self) -> bytes:
        body = _DS_FMT.pack(self.ds_id + 1, self.kind, self.n_parts, self.flags,
                            self.root_slot, self.param, 0)[:-4]
        return (body + struct.pack("<I", checksum(body))).ljust(DS_ENTRY_SIZE, b"\0")

    @classmethod
    def decode(cls, buf, off: int) -> "DsEntry | None":
        raw = bytes(buf[off:off + _DS_FMT.size])
        idp1, kind, n_parts, flags, root_slot, param, crc = _DS_FMT.unpack(raw)
        if idp1 == 0 or checksum(raw[:-4]) != crc:
            return None
        return cls(idp1 - 1, kind, n_parts, root_slot, param, flags)
