import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from disagg_nvm.layout import (
    DS_ENTRY_SIZE,
    OPLOG_PARAMS_MAX,
    OPLOG_SLOT,
    DsEntry,
    Layout,
    LogEntry,
    OpLogEntry,
    checksum,
    decode_entries,
    encode_record,
    pack_cursor,
    peek_header,
    record_size,
    record_valid,
    unpack_cursor,
)


def crc32c_reference(data: bytes) -> int:
    """Bitwise CRC-32C (Castagnoli, reflected polynomial 0x82F63B78)."""
    crc = 0xFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ (0x82F63B78 if crc & 1 else 0)
    return crc ^ 0xFFFFFFFF


def test_crc32c_check_value():
    assert crc32c_reference(b"123456789") == 0xE3069283
    assert checksum(b"123456789") == 0xE3069283


@given(st.binary(max_size=300))
def test_checksum_matches_reference(data):
    assert checksum(data) == crc32c_reference(data)


entries_st = st.lists(
    st.tuples(st.integers(0, 2**40), st.binary(min_size=1, max_size=64), st.booleans()),
    min_size=0, max_size=8,
)


def _entries(spec):
    return [LogEntry(a, d, ref=(7 << 8) if r else None) for a, d, r in spec]


@given(entries_st, st.integers(0, 2**40), st.integers(0, 2**40))
def test_record_round_trip(spec, seq, opn_hi):
    entries = _entries(spec)
    body, trailer = encode_record(seq, opn_hi, entries)
    buf = bytearray(record_size(len(body)) + 16)
    buf[8:8 + len(body) + len(trailer)] = body + trailer
    hdr = peek_header(buf, 8, len(buf))
    assert hdr is not None and hdr.seq == seq and hdr.opn_hi == opn_hi
    assert record_valid(buf, 8, hdr)
    got = decode_entries(buf, 8, hdr)
    assert [(e.address, e.length) for e in got] == [(e.address, len(e.data)) for e in entries]
    for g, e in zip(got, entries):
        assert g.payload == (e.data if e.ref is None else (7 << 8).to_bytes(8, "little"))


@given(entries_st.filter(bool), st.data())
def test_any_flipped_byte_invalidates_record(spec, data):
    body, trailer = encode_record(3, 0, _entries(spec))
    buf = bytearray(body + trailer)
    i = data.draw(st.integers(0, len(buf) - 1))
    buf[i] ^= 1 << data.draw(st.integers(0, 7))
    hdr = peek_header(buf, 0, len(buf))
    assert hdr is None or hdr.seq != 3 or not record_valid(buf, 0, hdr)


def test_missing_commit_mark_is_invalid():
    body, trailer = encode_record(1, 0, [LogEntry(64, b"abc")])
    buf = bytearray(body + bytes(len(trailer)))
    assert not record_valid(buf, 0, peek_header(buf, 0, len(buf)))


def test_record_never_exceeds_limit():
    body, trailer = encode_record(1, 0, [LogEntry(64, b"x" * 40)])
    buf = body + trailer
    assert peek_header(buf, 0, len(buf) - 1) is None
    assert record_size(len(body)) % 8 == 0


@given(st.integers(0, 0xFFFF), st.integers(0, 2**31), st.integers(0, 2**60),
       st.binary(max_size=OPLOG_PARAMS_MAX))
def test_oplog_round_trip(opcode, ds_id, opn, params):
    e = OpLogEntry(opcode, ds_id, opn, params)
    raw = e.encode()
    assert len(raw) == OPLOG_SLOT
    assert OpLogEntry.decode(raw) == e
    bad = bytearray(raw)
    bad[random.Random(opn).randrange(OPLOG_SLOT)] ^= 0x40
    assert OpLogEntry.decode(bad) is None


def test_oplog_params_too_large():
    with pytest.raises(ValueError):
        OpLogEntry(1, 0, 0, bytes(OPLOG_PARAMS_MAX + 1)).encode()
    assert OpLogEntry.decode(bytes(10)) is None


def test_ds_entry_round_trip_and_empty_slot():
    e = DsEntry(5, 3, 4, 20, 62)
    raw = e.encode()
    assert len(raw) == DS_ENTRY_SIZE
    assert DsEntry.decode(raw, 0) == e
    assert DsEntry.decode(bytes(DS_ENTRY_SIZE), 0) is None
    bad = bytearray(raw)
    bad[9] ^= 1
    assert DsEntry.decode(bad, 0) is None


@given(st.integers(1 << 20, 64 << 20), st.sampled_from([256, 1024, 4096]), st.integers(1, 8))
def test_layout_plan_is_ordered_and_round_trips(capacity, block, n_fe):
    try:
        lay = Layout.plan(capacity, n_fe=n_fe, block_size=block, log_len=32 << 10, oplog_slots=256)
    except ValueError:
        return
    assert Layout.unpack(lay.pack()) == lay
    order = [lay.seqno_off, lay.lock_table_off, lay.ds_table_off, lay.desc_table_off,
             lay.bitmap_off, lay.log_areas_off, lay.oplog_areas_off, lay.data_off]
    assert order == sorted(order)
    assert lay.data_off % block == 0
    assert lay.data_off + lay.data_len <= capacity
    assert lay.bitmap_off + (lay.n_blocks + 7) // 8 <= lay.log_areas_off
    assert lay.block_of(lay.block_addr(3)) == 3


def test_layout_rejects_bad_geometry():
    with pytest.raises(ValueError):
        Layout.plan(64 << 10)
    with pytest.raises(ValueError):
        Layout.plan(8 << 20, block_size=12)
    with pytest.raises(ValueError):
        Layout.plan(8 << 20, log_len=1001)
    with pytest.raises(ValueError):
        Layout.unpack(bytes(256))


@given(st.integers(0, 2**31), st.integers(0, 2**32 - 1))
def test_cursor_round_trip(lpn, head):
    assert unpack_cursor(pack_cursor(lpn, head)) == (lpn, head)
