"""Front-end page cache with sampled-LRU eviction, plus the tree level policy."""

from __future__ import annotations

import random
from collections import OrderedDict
from dataclasses import dataclass
from typing import Hashable, Iterable

POLICIES = ("hybrid", "lru", "rr")


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    evictions: int = 0

    @property
    def miss_ratio(self) -> float:
        total = self.hits + self.misses
        return self.misses / total if total else 0.0


class PageCache:
    """Fixed-capacity page store.

    ``hybrid`` samples ``rr_set_size`` resident pages uniformly and evicts the
    least recently used of the sample; ``rr`` is the one-page sample and
    ``lru`` keeps an exact recency order.
    """

    def __init__(self, capacity: int, page_size: int = 1024, policy: str = "hybrid",
                 rr_set_size: int = 32, seed: int = 0):
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r}")
        if capacity < 0 or rr_set_size < 1:
            raise ValueError("capacity must be >= 0 and rr_set_size >= 1")
        self.capacity = capacity
        self.page_size = page_size
        self.policy = policy
        self.rr_set_size = 1 if policy == "rr" else rr_set_size
        self.rng = random.Random(seed)
        self.stats = CacheStats()
        self._clock = 0
        self._pages: dict[Hashable, bytearray] = {}
        self._last: dict[Hashable, int] = {}
        self._keys: list[Hashable] = []
        self._index: dict[Hashable, int] = {}
        self._order: OrderedDict = OrderedDict()

    def __len__(self) -> int:
        return len(self._pages)

    def __contains__(self, key) -> bool:
        return key in self._pages

    def _touch(self, key) -> None:
        self._clock += 1
        if self.policy == "lru":
            self._order.move_to_end(key)
        else:
            self._last[key] = self._clock

    def get(self, key) -> bytearray | None:
        page = self._pages.get(key)
        if page is None:
            self.stats.misses += 1
            return None
        self.stats.hits += 1
        self._touch(key)
        return page

    def peek(self, key) -> bytearray | None:
        return self._pages.get(key)

    def choose_victim(self):
        if self.policy == "lru":
            return next(iter(self._order))
        n = len(self._keys)
        k = min(self.rr_set_size, n)
        if k == n:
            sample = self._keys
        else:
            sample = [self._keys[i] for i in self.rng.sample(range(n), k)]
        return min(sample, key=self._last.__getitem__)

    def put(self, key, data) -> Hashable | None:
        """Insert a page; returns the evicted key, if any."""
        if self.capacity == 0:
            return None
        if key in self._pages:
            self._pages[key] = bytearray(data)
            self._touch(key)
            return None
        victim = None
        if len(self._pages) >= self.capacity:
            victim = self.choose_victim()
            self._remove(victim)
            self.stats.evictions += 1
        self._pages[key] = bytearray(data)
        if self.policy == "lru":
            self._order[key] = None
        else:
            self._index[key] = len(self._keys)
            self._keys.append(key)
        self._touch(key)
        return victim

    def _remove(self, key) -> None:
        del self._pages[key]
        if self.policy == "lru":
            del self._order[key]
            return
        del self._last[key]
        i = self._index.pop(key)
        last = self._keys.pop()
        if i < len(self._keys):
            self._keys[i] = last
            self._index[last] = i

    def discard(self, key) -> None:
        if key in self._pages:
            self._remove(key)

    def purge(self) -> None:
        for key in list(self._pages):
            self._remove(key)

    def access(self, key) -> bool:
        """Trace-driven access: returns True on a hit, fetches on a miss."""
        if self.get(key) is not None:
            return True
        self.put(key, b"")
        return False


def simulate_policy(trace: Iterable[Hashable], capacity: int, policy: str,
                    rr_set_size: int = 32, seed: int = 0) -> float:
    """Miss ratio of one policy over a key trace."""
    cache = PageCache(capacity, 0, policy, rr_set_size, seed)
    for key in trace:
        cache.access(key)
    return cache.stats.miss_ratio


@dataclass
class TreeCachePolicy:
    """Level cut-off for caching tree nodes, adapted on the observed miss ratio."""

    level: int = 8
    window: int = 1000
    high: float = 0.5
    low: float = 0.25
    _hits: int = 0
    _misses: int = 0

    def __post_init__(self):
        if self.level < 1:
            raise ValueError("level threshold must be >= 1")

    def cacheable(self, depth: int) -> bool:
        return depth <= self.level

    def record(self, hit: bool) -> None:
        if hit:
            self._hits += 1
        else:
            self._misses += 1
        if self._hits + self._misses >= self.window:
            self.adapt()

    @property
    def alpha(self) -> float:
        total = self._hits + self._misses
        return self._misses / total if total else 0.0

    def adapt(self, alpha: float | None = None) -> int:
        a = self.alpha if alpha is None else alpha
        if a > self.high:
            self.level = max(1, self.level - 1)
        elif a < self.low:
            self.level += 1
        self._hits = self._misses = 0
        return self.level
