"""Workload description, key generators and the reference model."""

from __future__ import annotations

import bisect
import itertools
import random
from dataclasses import asdict, dataclass, field

from ..errors import ConfigError, DequeueEmpty, PopEmpty
from ..frontend import FrontendConfig, Mode
from ..structures import MAP_KINDS, Kind

PUT_RATIOS = (100, 50, 25, 10, 0)
DISTRIBUTIONS = ("uniform", "zipf")


class ZipfKeys:
    """Scrambled power-law keys over ``[0, n)``.

    Rank r is drawn with probability proportional to 1 / r**s and mapped
    through a seeded permutation, so hot keys are spread over the space.
    """

    def __init__(self, n: int, s: float = 0.99, seed: int = 0):
        if n < 1:
            raise ConfigError("key space must be non-empty")
        self.n = n
        self.rng = random.Random(seed)
        weights = [1.0 / (r ** s) for r in range(1, n + 1)]
        self.cdf = list(itertools.accumulate(weights))
        self.perm = list(range(n))
        random.Random(seed ^ 0x5EED).shuffle(self.perm)

    def next(self) -> int:
        u = self.rng.random() * self.cdf[-1]
        return self.perm[min(bisect.bisect_left(self.cdf, u), self.n - 1)]

    def take(self, count: int) -> list[int]:
        return [self.next() for _ in range(count)]


class UniformKeys:
    def __init__(self, n: int, seed: int = 0):
        self.n = n
        self.rng = random.Random(seed)

    def next(self) -> int:
        return self.rng.randrange(self.n)

    def take(self, count: int) -> list[int]:
        return [self.next() for _ in range(count)]


def key_source(distribution: str, n: int, seed: int, s: float = 0.99):
    if distribution == "zipf":
        return ZipfKeys(n, s, seed)
    if distribution == "uniform":
        return UniformKeys(n, seed)
    raise ConfigError(f"unknown distribution {distribution!r}")


def value_for(key: int, version: int) -> int:
    """Non-zero value that encodes its key, so a reader can spot a mixed read."""
    return (key << 20) | (version & 0xFFFFF) | 1 << 19


def value_matches(key: int, value: int | None) -> bool:
    return value is None or value >> 20 == key


@dataclass
class WorkloadSpec:
    kind: Kind = Kind.BST
    mode: Mode = Mode.RCB
    put_ratio: int = 100
    distribution: str = "uniform"
    zipf_s: float = 0.99
    ops: int = 10_000
    keys: int = 100_000
    preload: int = 0
    seed: int = 0
    batch_size: int | None = None  # None: the mode's default
    cache_fraction: float = 0.10
    cache_pages: int | None = None  # explicit page count overrides the fraction
    rr_set_size: int = 32
    policy: str = "hybrid"
    partitions: int | None = None
    writers: int = 1
    readers: int = 0
    reader_ops: int = 0  # per reader; 0 runs readers until the writers finish
    n_backends: int = 1
    mirrors: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = Kind(self.kind) if not isinstance(self.kind, str) else Kind[self.kind.upper()]
        self.mode = Mode(self.mode)

    def validate(self) -> None:
        if self.put_ratio not in PUT_RATIOS:
            raise ConfigError(f"put ratio must be one of {PUT_RATIOS}")
        if self.distribution not in DISTRIBUTIONS:
            raise ConfigError(f"distribution must be one of {DISTRIBUTIONS}")
        if self.ops < 0 or self.keys < 1 or self.preload < 0:
            raise ConfigError("ops, keys and preload must be non-negative (keys >= 1)")
        if not 0 <= self.cache_fraction <= 1:
            raise ConfigError("cache fraction must be in [0, 1]")
        if self.writers < 1 or self.readers < 0:
            raise ConfigError("need at least one writer")
        if self.kind not in MAP_KINDS and (self.writers > 1 or self.readers):
            raise ConfigError("stack and queue runs take a single writer and no readers")

    @property
    def get_ratio(self) -> int:
        return 100 - self.put_ratio

    def frontend_config(self, **kw) -> FrontendConfig:
        over = dict(rr_set_size=self.rr_set_size, policy=self.policy, seed=self.seed,
                    sole_writer=self.writers == 1 and self.readers == 0)
        if self.batch_size is not None:
            over["batch_size"] = self.batch_size
        over.update(kw)
        cfg = FrontendConfig.for_mode(self.mode, **over)
        cfg.validate()
        return cfg

    def as_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.name
        d["mode"] = self.mode.value
        return d


def generate_ops(spec: WorkloadSpec, writer: int = 0) -> list[tuple]:
    """Operation list for one writer; writers touch disjoint keys."""
    rng = random.Random(spec.seed * 7919 + writer)
    keys = key_source(spec.distribution, spec.keys, spec.seed * 31 + writer, spec.zipf_s)
    out = []
    for i in range(spec.ops):
        put = rng.randrange(100) < spec.put_ratio
        if spec.kind is Kind.STACK:
            out.append(("push", value_for(i, writer)) if put else ("pop",))
        elif spec.kind is Kind.QUEUE:
            out.append(("enqueue", value_for(i, writer)) if put else ("dequeue",))
        else:
            k = keys.next() * spec.writers + writer
            out.append(("insert", k, value_for(k, i)) if put else ("find", k))
    return out


def preload_ops(spec: WorkloadSpec) -> list[tuple]:
    if spec.kind is Kind.STACK:
        return [("push", value_for(i, 0)) for i in range(spec.preload)]
    if spec.kind is Kind.QUEUE:
        return [("enqueue", value_for(i, 0)) for i in range(spec.preload)]
    rng = random.Random(spec.seed ^ 0xF00D)
    picked = rng.sample(range(spec.keys * spec.writers), min(spec.preload, spec.keys * spec.writers))
    return [("insert", k, value_for(k, 0)) for k in picked]


def execute(fe, h, op: tuple):
    """Run one operation tuple against a front-end; returns its result."""
    name = op[0]
    if name == "insert":
        return fe.insert(h, op[1], op[2])
    if name == "delete":
        return fe.delete(h, op[1])
    if name == "find":
        return fe.find(h, op[1])
    if name == "push":
        return fe.push(h, op[1])
    if name == "enqueue":
        return fe.enqueue(h, op[1])
    if name == "transfer":
        return fe.transfer(h, op[1], op[2], op[3])
    try:
        return fe.pop(h) if name == "pop" else fe.dequeue(h)
    except (PopEmpty, DequeueEmpty):
        return None


class Model:
    """Reference semantics; ``state()`` has the same shape as a durable walk."""

    def __init__(self, kind: Kind):
        self.kind = Kind(kind)
        self.map: dict[int, int] = {}
        self.seq: list[int] = []

    def apply(self, op: tuple):
        name = op[0]
        if name == "insert":
            self.map[op[1]] = op[2]
        elif name == "delete":
            self.map.pop(op[1], None)
        elif name == "find":
            return self.map.get(op[1])
        elif name == "transfer":
            a, b, amount = op[1:]
            bal_a = self.map.get(a, 0)
            moved = min(amount, bal_a) if a != b else 0
            if moved:
                self.map[a] = bal_a - moved
                self.map[b] = self.map.get(b, 0) + moved
            return moved
        elif name in ("push", "enqueue"):
            self.seq.append(op[1])
        elif name == "pop":
            return self.seq.pop() if self.seq else None
        elif name == "dequeue":
            return self.seq.pop(0) if self.seq else None
        return None

    def state(self):
        if self.kind is Kind.STACK:
            return self.seq[::-1]
        if self.kind is Kind.QUEUE:
            return list(self.seq)
        return sorted(self.map.items())

    def run(self, ops) -> list:
        return [self.apply(op) for op in ops]


def prefix_states(kind: Kind, ops: list[tuple]) -> list:
    """state after each prefix of ``ops`` (index i = first i ops applied)."""
    m = Model(kind)
    out = [m.state()]
    for op in ops:
        m.apply(op)
        out.append(m.state())
    return out
