"""Shared pieces of the persistent structures.

Every node is stored as ``body | crc32c(body) u32`` padded to its extent size.
Pointers are absolute region offsets; 0 is null. Root anchors live in the
32-byte root slot of each partition and are always written as single 8-byte
words, so a reader's 8-byte read of an anchor is atomic.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Callable, Protocol

from ..errors import ChecksumMismatch
from ..layout import align, checksum

U64 = struct.Struct("<Q")
CRC = struct.Struct("<I")
KV = struct.Struct("<QQ")
MASK64 = (1 << 64) - 1


class Kind(enum.IntEnum):
    STACK = 1
    QUEUE = 2
    HASH = 3
    SKIPLIST = 4
    BST = 5
    BPT = 6
    MVBST = 7
    MVBPT = 8


class Op(enum.IntEnum):
    INSERT = 1
    DELETE = 2
    PUSH = 3
    POP = 4
    ENQUEUE = 5
    DEQUEUE = 6
    TRANSFER = 7


MAP_KINDS = (Kind.HASH, Kind.SKIPLIST, Kind.BST, Kind.BPT, Kind.MVBST, Kind.MVBPT)


def mix64(x: int) -> int:
    """splitmix64 finaliser: a fixed, well-spread 64-bit hash."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def partition_route(key: int, n_parts: int) -> int:
    """Partition of ``key``; the same function picks the back-end in a split deployment."""
    return (mix64(key) >> 32) % n_parts if n_parts > 1 else 0


class TornNode(ChecksumMismatch):
    pass


def seal(body: bytes, size: int) -> bytes:
    raw = body + CRC.pack(checksum(body))
    if len(raw) > size:
        raise ValueError("node body larger than its extent")
    return raw.ljust(size, b"\0")


def unseal(raw: bytes, body_len: int) -> bytes:
    body = raw[:body_len]
    if CRC.unpack_from(raw, body_len)[0] != checksum(body):
        raise TornNode("node checksum mismatch")
    return body


def node_size(body_len: int) -> int:
    return align(body_len + CRC.size, 8)


class ReadMem(Protocol):
    def read(self, addr: int, n: int, depth: int | None = None) -> bytes: ...
    def read_word(self, addr: int) -> int: ...


class Mem(ReadMem, Protocol):
    def put(self, addr: int, data: bytes) -> None: ...
    def put_word(self, addr: int, value: int) -> None: ...
    def alloc(self, n: int) -> int: ...
    def retire(self, addr: int) -> None: ...
    def is_fresh(self, addr: int) -> bool: ...


class RawMem:
    """Read-only view over a region bytearray (recovery, oracles, sweeps)."""

    def __init__(self, region: bytearray):
        self.region = region

    def read(self, addr: int, n: int, depth: int | None = None) -> bytes:
        if addr <= 0 or addr + n > len(self.region):
            raise ValueError(f"pointer {addr} outside the region")
        return bytes(self.region[addr:addr + n])

    def read_word(self, addr: int) -> int:
        return U64.unpack_from(self.region, addr)[0]


class ReaderMem:
    """Read-only view for lock-free/seqlock readers: direct reads, no cache."""

    def __init__(self, read: Callable[[int, int], bytes], word: Callable[[int], int]):
        self._read = read
        self._word = word

    def read(self, addr: int, n: int, depth: int | None = None) -> bytes:
        if addr <= 0:
            raise ValueError("null pointer dereference")
        return self._read(addr, n)

    def read_word(self, addr: int) -> int:
        return self._word(addr)


@dataclass
class Walk:
    content: list
    extents: list[tuple[int, int]]


# -- pending operation buffers -----------------------------------------------


@dataclass
class PendingMap:
    """Net effect of unflushed map operations: key -> value, or None for delete."""

    ops: list = field(default_factory=list)
    effects: dict[int, int | None] = field(default_factory=dict)

    def set(self, key: int, value: int | None) -> None:
        self.effects[key] = value

    def lookup(self, key: int):
        return self.effects.get(key, ...)

    def __bool__(self) -> bool:
        return bool(self.ops)


@dataclass
class PendingStack:
    ops: list = field(default_factory=list)
    pushes: list[int] = field(default_factory=list)
    popped: list[int] = field(default_factory=list)  # durable node addresses
    cursor: int | None = None  # next durable node to pop (None: read the anchor)
    annulled: int = 0

    def __bool__(self) -> bool:
        return bool(self.ops)


@dataclass
class PendingQueue:
    ops: list = field(default_factory=list)
    enqueues: list[int] = field(default_factory=list)
    dequeued: list[int] = field(default_factory=list)
    cursor: int | None = None
    annulled: int = 0

    def __bool__(self) -> bool:
        return bool(self.ops)


class Structure:
    """Encoding and algorithms of one structure kind, parameterised by memory."""

    kind: Kind
    reader_mode = "seqlock"  # "seqlock", "snapshot" or "plain"
    mv = False

    def __init__(self, param: int = 0, cache_depth: Callable[[int], bool] | None = None):
        self.param = param

    def new_pending(self):
        return PendingMap()

    def init_partition(self, mem: Mem, root: int) -> None:
        pass

    def walk(self, mem: ReadMem, root: int) -> Walk:
        raise NotImplementedError

    def check(self, mem: ReadMem, root: int) -> bool:
        """Shape invariants; the default only requires a clean walk."""
        self.walk(mem, root)
        return True
