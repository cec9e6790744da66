"""Front tier of the two-tier allocator.

Slabs come from the back-end in whole blocks; the front-end carves them into
8-byte-aligned extents with best fit and returns slabs that become empty once
more than ``reclaim_threshold`` blocks sit unused.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Callable

from .errors import ConfigError, DoubleFree
from .layout import align


@dataclass
class Slab:
    base: int
    size: int
    used: int = 0
    free: dict[int, int] = field(default_factory=dict)  # start -> length
    ends: dict[int, int] = field(default_factory=dict)  # end -> start


class SlabAllocator:
    def __init__(self, slab_size: int, block_size: int,
                 grab: Callable[[int], int], release: Callable[[list[int]], None],
                 reclaim_threshold: int = 4):
        if slab_size % block_size:
            raise ConfigError("slab_size must be a multiple of block_size")
        self.slab_size = slab_size
        self.block_size = block_size
        self.slab_blocks = slab_size // block_size
        self.grab = grab
        self.release = release
        self.reclaim_threshold = reclaim_threshold
        self.slabs: dict[int, Slab] = {}
        self.full: set[int] = set()
        self.partial: set[int] = set()
        self.empty: set[int] = set()
        self.large: dict[int, int] = {}  # address -> block count
        self.live: dict[int, tuple[int, int]] = {}  # address -> (size, slab base)
        self._index: list[tuple[int, int]] = []  # (length, start) of free extents
        self._extent_slab: dict[int, int] = {}
        self.rpcs = 0

    # -- bookkeeping -----------------------------------------------------

    def _add_free(self, slab: Slab, start: int, length: int) -> None:
        slab.free[start] = length
        slab.ends[start + length] = start
        self._extent_slab[start] = slab.base
        bisect.insort(self._index, (length, start))

    def _drop_free(self, slab: Slab, start: int) -> int:
        length = slab.free.pop(start)
        del slab.ends[start + length]
        del self._extent_slab[start]
        i = bisect.bisect_left(self._index, (length, start))
        del self._index[i]
        return length

    def _relist(self, slab: Slab) -> None:
        for lst in (self.full, self.partial, self.empty):
            lst.discard(slab.base)
        if slab.used == 0:
            self.empty.add(slab.base)
        elif slab.used == slab.size or not slab.free:
            self.full.add(slab.base)
        else:
            self.partial.add(slab.base)

    def _new_slab(self) -> Slab:
        base = self.grab(self.slab_blocks)
        self.rpcs += 1
        slab = Slab(base, self.slab_size)
        self.slabs[base] = slab
        self._add_free(slab, base, self.slab_size)
        self._relist(slab)
        return slab

    # -- API -------------------------------------------------------------

    def alloc(self, size: int) -> int:
        if size <= 0:
            raise ValueError("size must be positive")
        if size > self.slab_size:
            n = -(-size // self.block_size)
            addr = self.grab(n)
            self.rpcs += 1
            self.large[addr] = n
            return addr
        need = align(size, 8)
        i = bisect.bisect_left(self._index, (need, -1))
        if i == len(self._index):
            self._new_slab()
            i = bisect.bisect_left(self._index, (need, -1))
        length, start = self._index[i]
        slab = self.slabs[self._extent_slab[start]]
        self._drop_free(slab, start)
        if length > need:
            self._add_free(slab, start + need, length - need)
        slab.used += need
        self.live[start] = (need, slab.base)
        self._relist(slab)
        return start

    def free(self, addr: int) -> None:
        if addr in self.large:
            n = self.large.pop(addr)
            self.release([addr + i * self.block_size for i in range(n)])
            self.rpcs += 1
            return
        if addr not in self.live:
            raise DoubleFree(f"extent {addr} is not allocated here")
        size, base = self.live.pop(addr)
        slab = self.slabs[base]
        start, length = addr, size
        prev = slab.ends.get(start)
        if prev is not None:
            length += self._drop_free(slab, prev)
            start = prev
        if start + length in slab.free:
            length += self._drop_free(slab, start + length)
        self._add_free(slab, start, length)
        slab.used -= size
        self._relist(slab)
        if slab.used == 0:
            self.reclaim()

    def size_of(self, addr: int) -> int | None:
        if addr in self.live:
            return self.live[addr][0]
        if addr in self.large:
            return self.large[addr] * self.block_size
        return None

    def free_blocks(self) -> int:
        return len(self.empty) * self.slab_blocks

    def reclaim(self) -> list[int]:
        """Return empty slabs to the back-end until at most the threshold remain."""
        returned = []
        while self.empty and self.free_blocks() > self.reclaim_threshold:
            base = max(self.empty)
            slab = self.slabs.pop(base)
            self._drop_free(slab, base)
            self.empty.discard(base)
            returned.append(base)
        if returned:
            blocks = [b + i * self.block_size for b in returned for i in range(self.slab_blocks)]
            self.release(blocks)
            self.rpcs += 1
        return returned

    def owned_blocks(self) -> set[int]:
        out = set()
        for base in self.slabs:
            out.update(base + i * self.block_size for i in range(self.slab_blocks))
        for addr, n in self.large.items():
            out.update(addr + i * self.block_size for i in range(n))
        return out

    def extents(self) -> list[tuple[int, int]]:
        out = [(a, s) for a, (s, _) in self.live.items()]
        out += [(a, n * self.block_size) for a, n in self.large.items()]
        return sorted(out)

    def forget(self) -> None:
        """Drop all volatile state (the owning front-end crashed)."""
        self.__init__(self.slab_size, self.block_size, self.grab, self.release, self.reclaim_threshold)
