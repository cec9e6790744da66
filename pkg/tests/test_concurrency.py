import pytest
from hypothesis import given
from hypothesis import strategies as st

from disagg_nvm.backend import BackendNode
from disagg_nvm.client import BackendClient
from disagg_nvm.concurrency import (
    SeqlockReader,
    TornRead,
    is_free,
    lock_owner,
    pack_lock,
    unlock_without_holding,
    unpack_lock,
    writer_lock,
    writer_unlock,
)
from disagg_nvm.errors import NotOwner
from disagg_nvm.fabric import Simulator, VerbKind

BE = 0


def _setup(n_fe=2):
    sim = Simulator(seed=0, record_trace=True)
    sim.add_node(BE, 1 << 20)
    node = BackendNode.format(sim, BE, n_fe=n_fe, log_len=32 << 10, oplog_slots=256)
    clients = []
    for k in range(n_fe):
        sim.add_node(100 + k)
        node.attach(100 + k)
        clients.append(BackendClient(sim, 100 + k, BE).connect())
    node.start()
    return sim, node, clients


@given(st.one_of(st.none(), st.integers(0, 0xFFFE)), st.one_of(st.none(), st.integers(0, 0xFFFE)),
       st.integers(0, 2**32 - 1))
def test_lock_word_round_trip(owner, slot, lpn):
    word = pack_lock(owner, slot, lpn)
    assert unpack_lock(word) == (owner, slot, lpn)
    assert is_free(word) == (owner is None)
    assert lock_owner(word) == owner


def test_uncontended_acquire_is_one_cas():
    sim, node, (a, _) = _setup()
    held = writer_lock(a, 3, session=1)
    assert held.cas_attempts == 1
    assert lock_owner(a.atomic_read(a.layout.lock_addr(3))) == a.fe
    free = writer_unlock(a, held)
    again = writer_lock(a, 3, session=2, guess=free)
    assert again.cas_attempts == 1
    writer_unlock(a, again)


def test_contenders_serialise():
    sim, node, clients = _setup()
    inside, log = [0], []

    def body(c):
        guess = 0
        for _ in range(20):
            held = writer_lock(c, 0, session=len(log) + 1, guess=guess)
            inside[0] += 1
            assert inside[0] == 1
            log.append(c.fe)
            sim.sleep(500)
            inside[0] -= 1
            guess = writer_unlock(c, held)

    tasks = [sim.spawn(body, c, node=c.fe) for c in clients]
    while not all(t.done for t in tasks):
        sim.sleep(10_000)
    assert all(t.error is None for t in tasks)
    assert sorted(log) == sorted([100] * 20 + [101] * 20)


def test_non_spinning_acquire_and_foreign_unlock():
    sim, node, (a, b) = _setup()
    held = writer_lock(a, 1, session=1)
    assert writer_lock(b, 1, session=1, spin=False) is None
    with pytest.raises(NotOwner):
        unlock_without_holding(b, 1)
    with pytest.raises(NotOwner):
        writer_unlock(b, held)
    writer_unlock(a, held)


def test_lost_reply_lock_is_adopted():
    sim, node, (a, _) = _setup()
    word = pack_lock(a.fe, None, 0)
    node.region[a.layout.lock_addr(2):a.layout.lock_addr(2) + 8] = word.to_bytes(8, "little")
    held = writer_lock(a, 2, session=5)
    assert held.word == word
    writer_unlock(a, held)


def test_seqlock_reader_retries_while_sn_odd():
    sim, node, (a, _) = _setup()
    node.seqno_bump()
    sim.call_at(sim.now + 9000, node.seqno_bump)
    reader = SeqlockReader(a)
    assert reader.read(lambda: 42) == 42
    assert reader.stats.atomic_reads > 2


def test_seqlock_reader_detects_change_and_torn_reads():
    sim, node, (a, _) = _setup()
    reader = SeqlockReader(a)
    calls = []

    def fn():
        calls.append(sim.now)
        if len(calls) == 1:
            node.seqno_bump()
            node.seqno_bump()
        return len(calls)

    assert reader.read(fn) == 2
    assert reader.stats.retries == 1

    def broken():
        raise ValueError("bad node")

    with pytest.raises(TornRead):
        reader.read(broken)
    assert reader.stats.torn_consistent == 1
    assert sim.counters.count(a.fe, VerbKind.ATOMIC_READ64) > 0
