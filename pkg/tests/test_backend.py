import pytest

from disagg_nvm.backend import BackendNode, TxState
from disagg_nvm.client import BackendClient
from disagg_nvm.errors import ChecksumMismatch, ConfigError, DestinationUnreachable, DoubleFree, OutOfMemory
from disagg_nvm.fabric import Simulator
from disagg_nvm.layout import LogEntry
from disagg_nvm.recovery import recover_backend

BE, FE, MIRROR = 0, 100, 50
PLAN = dict(n_fe=2, log_len=32 << 10, oplog_slots=256)


def _setup(start=True, capacity=1 << 20, mirror=False):
    sim = Simulator(seed=1)
    sim.add_node(BE, capacity)
    sim.add_node(FE)
    node = BackendNode.format(sim, BE, **PLAN)
    if mirror:
        sim.add_node(MIRROR, capacity)
        m = BackendNode.format(sim, MIRROR, role="mirror", **PLAN)
        node.attach_mirror(m)
        m.start()
    node.attach(FE)
    if start:
        node.start()
    client = BackendClient(sim, FE, BE).connect()
    return sim, node, client


def _data(node, i):
    return node.layout.block_addr(node.layout.root_blocks) + 16 * i


def test_format_rejects_nodes_without_region():
    sim = Simulator()
    sim.add_node(3)
    with pytest.raises(ConfigError):
        BackendNode.format(sim, 3)
    sim.add_node(4, 1 << 20)
    with pytest.raises(ConfigError):
        BackendNode.format(sim, 4, role="leader", **PLAN)


def test_attach_is_idempotent_and_bounded():
    sim, node, _ = _setup()
    assert node.attach(FE) == node.slot_of(FE) == 0
    node.attach(101)
    with pytest.raises(ConfigError):
        node.attach(102)


def test_replay_applies_committed_records_in_order():
    sim, node, client = _setup()
    a = _data(node, 0)
    client.remote_tx_write([LogEntry(a, b"first...")])
    client.remote_tx_write([LogEntry(a, b"second..")], wait_applied=True)
    assert node.region[a:a + 8] == b"second.."
    assert node.stats.records_applied == 2
    assert node.seqno % 2 == 0 and node.seqno == 4
    assert node.cursor(0)[0] == 2


def test_three_unapplied_records_recovered():
    sim, node, client = _setup(start=False)
    for i in range(3):
        client.remote_tx_write([LogEntry(_data(node, i), bytes([i + 1]) * 8)])
    sim.crash_now(BE)
    node, rep = recover_backend(sim, BE)
    assert rep.records_replayed == 3
    assert rep.sn_delta == 6
    assert rep.case == "3.a"
    for i in range(3):
        assert node.region[_data(node, i):_data(node, i) + 8] == bytes([i + 1]) * 8


def test_torn_tail_is_detected_and_discarded():
    sim, node, client = _setup(start=False)
    client.remote_tx_write([LogEntry(_data(node, 0), b"A" * 8)])
    sim.inject_crash(BE, at_event=sim.event_count + 1)
    with pytest.raises(DestinationUnreachable):
        client.remote_tx_write([LogEntry(_data(node, 1), b"B" * 400)])
    sim.revive(BE)
    node = BackendNode.open(sim, BE)
    v = node.validate_slot(0)
    assert v.valid_records == 1
    node2, rep = recover_backend(sim, BE)
    assert rep.records_replayed == 1
    assert node2.validate_slot(0).state is TxState.EMPTY
    assert node2.region[_data(node2, 1):_data(node2, 1) + 8] != b"B" * 8


def test_validate_states():
    sim, node, client = _setup(start=False)
    assert node.validate_slot(0).state is TxState.EMPTY
    client.remote_tx_write([LogEntry(_data(node, 0), b"x" * 8)])
    assert node.validate_slot(0).state is TxState.CONSISTENT
    log_off, _ = node.layout.log_area(0)
    node.region[log_off + 30] ^= 0xFF
    assert node.validate_slot(0).state is TxState.INCONSISTENT
    assert node.discard_log_tail(0) > 0
    assert node.validate_slot(0).state is TxState.EMPTY


def test_out_of_range_entry_is_rejected():
    sim, node, client = _setup(start=False)
    client.remote_tx_write([LogEntry(node.layout.lock_table_off, bytes(8))])
    rec = node.next_record(0)
    with pytest.raises(ChecksumMismatch):
        node._apply_record(0, *rec, timed=False)
    assert node.seqno == 0


def test_allocator_mailbox():
    sim, node, client = _setup()
    before = node.free_block_count()
    blocks = client.malloc(5)
    assert len(set(blocks)) == 5 and all(node.is_allocated(b) for b in blocks)
    assert node.free_block_count() == before - 5
    first = client.malloc(4, contiguous=True)[0]
    bs = node.layout.block_size
    assert all(node.is_allocated(first + i * bs) for i in range(4))
    client.free(blocks[:2])
    assert not node.is_allocated(blocks[0])
    with pytest.raises(DoubleFree):
        client.free(blocks[:1])
    client.deferred_free(blocks[2:], 10)
    assert node.pending_deferred() == set(blocks[2:])
    assert all(node.is_allocated(b) for b in blocks[2:])
    sim.sleep(20_000)
    assert not node.pending_deferred()
    assert not any(node.is_allocated(b) for b in blocks[2:])
    with pytest.raises(OutOfMemory):
        client.malloc(node.layout.n_blocks, contiguous=True)


def test_root_blocks_reserved_and_free_rejects_them():
    sim, node, _ = _setup()
    lay = node.layout
    assert node.allocated_blocks()[:lay.root_blocks] == [lay.block_addr(b) for b in range(lay.root_blocks)]
    assert node.free([lay.block_addr(0)]) == 1
    assert node.stats.double_frees == 1


def test_mirror_receives_logs_and_replays():
    sim, node, client = _setup(mirror=True)
    a = _data(node, 0)
    client.remote_tx_write([LogEntry(a, b"mirrored")], wait_applied=True)
    mirror = BackendNode.open(sim, MIRROR, role="mirror")
    for _ in range(50):
        if mirror.region[a:a + 8] == b"mirrored":
            break
        sim.sleep(1000)
    assert sim.node(MIRROR).region[a:a + 8] == b"mirrored"


def test_mirror_loss_is_tolerated():
    sim, node, client = _setup(mirror=True)
    sim.crash_now(MIRROR)
    client.remote_tx_write([LogEntry(_data(node, 0), b"solo....")], wait_applied=True)
    assert node.dropped_mirrors == [MIRROR]
    assert any(e[0] == "mirror-dropped" and e[3] == MIRROR for e in sim.local_log)


def test_dump_and_load_region(tmp_path):
    sim, node, client = _setup()
    client.remote_tx_write([LogEntry(_data(node, 0), b"persist!")], wait_applied=True)
    path = tmp_path / "region.bin"
    node.dump_region(path)
    sim2 = Simulator()
    sim2.add_node(BE, len(node.region))
    BackendNode.load_region(sim2, BE, path)
    n2 = BackendNode.open(sim2, BE)
    assert n2.region[_data(n2, 0):_data(n2, 0) + 8] == b"persist!"
    assert n2.layout == node.layout
