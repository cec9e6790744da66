"""Single-writer/multi-reader synchronisation over back-end atomics.

Lock word (8 B in the lock table)::

    bits 48..63  owner front-end id + 1 (0 = unlocked)
    bits 32..47  descriptor slot + 1 of the last holder (0 = unknown)
    bits  0..31  LPN the last holder's records must reach before the next
                 holder may read the structure

Keeping the last holder in the free word lets the next writer wait for that
holder's records to be replayed (log areas replay independently of each other)
and tells it whether its own cache may be stale.

Lock-ahead word (8 B per lock in each front-end descriptor)::

    (session << 2) | intent      intent: 1 = acquire, 2 = release
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .client import BackendClient
from .errors import ChecksumMismatch, NotOwner, NvmError, RegionBoundsError
from .layout import D_CURSOR, LA_ACQUIRE, LA_RELEASE, lock_ahead_word, unpack_cursor

BACKOFF_MIN_NS = 1000
BACKOFF_MAX_NS = 16000


def pack_lock(owner: int | None, last_slot: int | None = None, last_lpn: int = 0) -> int:
    o = 0 if owner is None else owner + 1
    s = 0 if last_slot is None else last_slot + 1
    return (o << 48) | (s << 32) | (last_lpn & 0xFFFFFFFF)


def unpack_lock(word: int) -> tuple[int | None, int | None, int]:
    o = word >> 48
    s = (word >> 32) & 0xFFFF
    return (o - 1 if o else None), (s - 1 if s else None), word & 0xFFFFFFFF


def lock_owner(word: int) -> int | None:
    return unpack_lock(word)[0]


def is_free(word: int) -> bool:
    return word >> 48 == 0


@dataclass
class Acquired:
    index: int
    word: int
    session: int
    cas_attempts: int
    last_slot: int | None
    waited_ns: int


class Backoff:
    def __init__(self, sim, lo: int = BACKOFF_MIN_NS, hi: int = BACKOFF_MAX_NS):
        self.sim = sim
        self.lo = lo
        self.hi = hi
        self.delay = lo

    def pause(self) -> None:
        self.sim.sleep(self.delay)
        self.delay = min(self.hi, self.delay * 2)

    def reset(self) -> None:
        self.delay = self.lo


def writer_lock(client: BackendClient, index: int, session: int, guess: int = 0,
                on_cas: Callable[[int], None] | None = None, spin: bool = True) -> Acquired | None:
    """Spin on CAS until the lock is ours, log the acquire, fetch LPN.

    ``guess`` is the free word we expect (normally the one we released last),
    so an uncontended acquire costs exactly one CAS. With ``spin=False`` a
    lock held by someone else returns None instead of waiting.
    """
    me = client.fe
    addr = client.layout.lock_addr(index)
    expected = guess
    attempts = 0
    backoff = Backoff(client.sim)
    while True:
        swap = expected | ((me + 1) << 48)
        prior = client.cas(addr, expected, swap)
        attempts += 1
        if on_cas is not None:
            on_cas(prior)
        if prior == expected:
            break
        if lock_owner(prior) == me:
            # a CAS whose reply was lost (back-end crash), or an unlock that never landed
            swap, expected = prior, prior & ((1 << 48) - 1)
            break
        if is_free(prior):
            expected = prior
            continue
        if not spin:
            return None
        expected = prior & ((1 << 48) - 1)
        backoff.pause()
    client.write_lock_ahead(index, lock_ahead_word(session, LA_ACQUIRE))
    client.refresh_cursor()
    _, last_slot, last_lpn = unpack_lock(expected)
    start = client.sim.now
    if last_slot is not None and last_slot != client.slot:
        cursor_addr = client.layout.desc_off(last_slot) + D_CURSOR
        backoff.reset()
        while unpack_cursor(client.atomic_read(cursor_addr))[0] < last_lpn:
            backoff.pause()
    return Acquired(index, swap, session, attempts, last_slot, client.sim.now - start)


def writer_unlock(client: BackendClient, held: Acquired) -> int:
    """Log the release, then hand the word back with our replay target."""
    if lock_owner(held.word) != client.fe:
        raise NotOwner(f"lock {held.index} was acquired by {lock_owner(held.word)}, not {client.fe}")
    client.write_lock_ahead(held.index, lock_ahead_word(held.session, LA_RELEASE))
    free = pack_lock(None, client.slot, client.next_seq)
    prior = client.cas(client.layout.lock_addr(held.index), held.word, free)
    if prior != held.word:
        raise NotOwner(f"lock {held.index} is held by {lock_owner(prior)}")
    return free


def unlock_without_holding(client: BackendClient, index: int) -> None:
    """Reject an unlock by a front-end that does not own the word."""
    word = client.atomic_read(client.layout.lock_addr(index))
    if lock_owner(word) != client.fe:
        raise NotOwner(f"lock {index} is not held by front-end {client.fe}")


class TornRead(NvmError):
    """A node failed its checksum while being read without a lock."""


@dataclass
class ReadStats:
    attempts: int = 0
    retries: int = 0
    torn_consistent: int = 0  # checksum failures inside a validated read
    atomic_reads: int = 0

    @property
    def retry_fraction(self) -> float:
        return self.retries / self.attempts if self.attempts else 0.0


class SeqlockReader:
    """Retry-based read protocol: SN even means no record is being applied."""

    def __init__(self, client: BackendClient, stats: ReadStats | None = None):
        self.client = client
        self.stats = stats or ReadStats()

    def reader_lock(self, backoff: Backoff | None = None) -> int:
        backoff = backoff or Backoff(self.client.sim)
        while True:
            sn = self.client.read_seqno()
            self.stats.atomic_reads += 1
            if sn % 2 == 0:
                return sn
            backoff.pause()

    def reader_unlock(self, start_sn: int) -> bool:
        """True when the read was consistent, False when it must be retried."""
        self.stats.atomic_reads += 1
        return self.client.read_seqno() == start_sn

    def read(self, fn: Callable[[], object]):
        backoff = Backoff(self.client.sim)
        while True:
            self.stats.attempts += 1
            sn = self.reader_lock(backoff)
            torn = False
            try:
                result = fn()
            except (TornRead, ChecksumMismatch, RegionBoundsError, ValueError, KeyError, RecursionError):
                torn = True
                result = None
            if self.reader_unlock(sn):
                if torn:
                    self.stats.torn_consistent += 1
                    raise TornRead("checksum failure inside a validated read")
                return result
            self.stats.retries += 1
            backoff.pause()
