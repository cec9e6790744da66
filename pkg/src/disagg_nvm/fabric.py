"""Deterministic discrete-event fabric with one-sided verbs.

One simulated clock drives everything. Node logic runs either in the caller's
own flow ("direct mode", the main greenlet) or as cooperatively scheduled
tasks (greenlets) spawned with :meth:`Simulator.spawn`. A task gives up
control only when it sleeps, which every verb does for its latency, so a
verb's memory effect lands at its completion time in a total, seeded order.

Crash semantics follow the torn-write model: when a node crashes, every write
in flight to or from it leaves a seeded, strictly shorter prefix of its
payload durable; every other in-flight verb fails.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import itertools
import json
import random
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import greenlet

from .errors import (
    ConfigError,
    DestinationUnreachable,
    MisalignedAtomic,
    NodeCrashed,
    RegionBoundsError,
)

_U64 = struct.Struct("<Q")


class VerbKind(enum.Enum):
    READ = "ReadVerb"
    WRITE = "WriteVerb"
    CAS64 = "CompareAndSwap64"
    ATOMIC_READ64 = "AtomicRead64"


@dataclass(frozen=True)
class LatencyConfig:
    rtt_ns: int = 2000
    nvm_write_ns: int = 200
    dram_read_ns: int = 0
    # local front-end work per data-structure call; keeps all-hit runs finite
    cpu_op_ns: int = 100

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass
class FabricEvent:
    seq: int
    src: int
    dst: int
    kind: VerbKind
    address: int
    length: int
    issue_time: int
    complete_time: int
    outcome: str = "pending"
    done: int = -1  # position in completion order (the order effects took place)

    def as_record(self) -> dict:
        return {
            "time": self.complete_time,
            "issue": self.issue_time,
            "src": self.src,
            "dst": self.dst,
            "kind": self.kind.value,
            "address": self.address,
            "length": self.length,
            "outcome": self.outcome,
            "done": self.done,
        }


class VerbCounters:
    """Per (src, kind) monotone counts and byte totals."""

    def __init__(self):
        self._counts: dict[tuple[int, VerbKind], list[int]] = {}

    def add(self, src: int, kind: VerbKind, nbytes: int) -> None:
        slot = self._counts.setdefault((src, kind), [0, 0])
        slot[0] += 1
        slot[1] += nbytes

    def count(self, src: int | None = None, kind: VerbKind | None = None) -> int:
        return sum(v[0] for (s, k), v in self._counts.items()
                   if (src is None or s == src) and (kind is None or k == kind))

    def bytes(self, src: int | None = None, kind: VerbKind | None = None) -> int:
        return sum(v[1] for (s, k), v in self._counts.items()
                   if (src is None or s == src) and (kind is None or k == kind))

    def snapshot(self) -> dict[str, dict[str, list[int]]]:
        out: dict[str, dict[str, list[int]]] = {}
        for (src, kind), (n, b) in sorted(self._counts.items(), key=lambda kv: (kv[0][0], kv[0][1].value)):
            out.setdefault(str(src), {})[kind.value] = [n, b]
        return out

    def reset(self) -> None:
        self._counts.clear()


@dataclass
class Node:
    id: int
    name: str = ""
    region: bytearray | None = None
    alive: bool = True
    epoch: int = 0
    # volatile service object; receives on_write(addr, length, src) -> extra ns
    handler: Any = None
    crash_time: int | None = None
    # block-device style storage for mirrors without NVM; survives crashes
    disk: list = field(default_factory=list)


@dataclass
class _Inflight:
    event: FabricEvent
    payload: bytes | None
    torn: bool = False


@dataclass
class Task:
    name: str
    node: int | None
    glet: greenlet.greenlet = field(repr=False)
    done: bool = False
    killed: bool = False
    error: BaseException | None = None
    result: Any = None


class Signal:
    """Wake-up point for tasks (a condition variable without a lock)."""

    def __init__(self, sim: "Simulator"):
        self._sim = sim
        self._waiters: list[Task] = []

    def wait(self, timeout: int | None = None) -> None:
        task = self._sim.current_task()
        if task is None:
            raise RuntimeError("Signal.wait is only valid inside a task")
        self._waiters.append(task)
        if timeout is not None:
            self._sim.call_later(timeout, self._timeout, task)
        self._sim._park()

    def _timeout(self, task: Task) -> None:
        if task in self._waiters:
            self._waiters.remove(task)
            self._sim._resume(task)

    def fire(self) -> None:
        waiters, self._waiters = self._waiters, []
        for task in waiters:
            self._sim.call_at(self._sim.now, self._sim._resume, task)


class Simulator:
    def __init__(self, latency: LatencyConfig | None = None, seed: int = 0, record_trace: bool = True):
        self.latency = latency or LatencyConfig()
        self.seed = seed
        self.rng = random.Random(seed)
        self.now = 0
        self.nodes: dict[int, Node] = {}
        self.counters = VerbCounters()
        self.record_trace = record_trace
        self.trace: list[FabricEvent] = []
        self.event_count = 0
        self._done_count = 0
        self.local_log: list[tuple] = []  # back-end local actions, for ordering checks
        self._digest = hashlib.sha256()
        self._queue: list = []
        self._seq = itertools.count()
        self._tasks: dict[greenlet.greenlet, Task] = {}
        self._graveyard: list[Task] = []
        self._inflight: dict[int, list[_Inflight]] = {}
        self._pair_last: dict[tuple[int, int], int] = {}
        self._event_triggers: dict[int, list[int]] = {}
        self._main = greenlet.getcurrent()
        self._running = False
        self.crash_hooks: list[Callable[[int], None]] = []

    # -- nodes -------------------------------------------------------------

    def add_node(self, node_id: int, capacity: int = 0, name: str = "") -> Node:
        if node_id in self.nodes:
            raise ConfigError(f"node {node_id} already exists")
        node = Node(node_id, name or f"node{node_id}", bytearray(capacity) if capacity else None)
        self.nodes[node_id] = node
        return node

    def node(self, node_id: int) -> Node:
        return self.nodes[node_id]

    def is_alive(self, node_id: int) -> bool:
        return self.nodes[node_id].alive

    # -- scheduling --------------------------------------------------------

    def call_at(self, t: int, fn: Callable, *args, node: int | None = None) -> None:
        epoch = self.nodes[node].epoch if node is not None else None
        heapq.heappush(self._queue, (max(t, self.now), next(self._seq), fn, args, node, epoch))

    def call_later(self, dt: int, fn: Callable, *args, node: int | None = None) -> None:
        self.call_at(self.now + dt, fn, *args, node=node)

    def spawn(self, fn: Callable, *args, node: int | None = None, name: str = "", start: int | None = None) -> Task:
        task = Task(name or getattr(fn, "__name__", "task"), node, None)  # type: ignore[arg-type]

        def body():
            try:
                task.result = fn(*args)
            except NodeCrashed as exc:
                if exc.node != task.node:
                    task.error = exc
            except BaseException as exc:  # surfaced by run()
                task.error = exc
            finally:
                task.done = True

        task.glet = greenlet.greenlet(body, parent=self._main)
        self._tasks[task.glet] = task
        self.call_at(self.now if start is None else start, self._resume, task)
        return task

    def current_task(self) -> Task | None:
        return self._tasks.get(greenlet.getcurrent())

    def _park(self) -> Any:
        return self._main.switch()

    def _resume(self, task: Task, value: Any = None) -> None:
        if task.done or task.killed:
            return
        if task.glet:
            task.glet.switch(value)
        else:
            task.glet.switch()
        if task.done:
            del self._tasks[task.glet]
            if task.error is not None:
                err, task.error = task.error, None
                raise err

    def sleep(self, dt: int) -> None:
        if dt < 0:
            raise ValueError("negative sleep")
        task = self.current_task()
        if task is not None:
            self.call_at(self.now + dt, self._resume, task)
            self._park()
            if task.node is not None and not self.nodes[task.node].alive:
                raise NodeCrashed(task.node)
        else:
            self.run(until=self.now + dt)

    def run(self, until: int | None = None, max_events: int | None = None) -> None:
        """Process events in (time, seq) order; only the main flow may call this."""
        if greenlet.getcurrent() is not self._main:
            raise RuntimeError("run() called from inside a task")
        processed = 0
        while self._queue:
            t = self._queue[0][0]
            if until is not None and t > until:
                break
            _, _, fn, args, node, epoch = heapq.heappop(self._queue)
            if node is not None:
                n = self.nodes[node]
                if not n.alive or n.epoch != epoch:
                    continue
            self.now = t
            fn(*args)
            processed += 1
            if max_events is not None and processed >= max_events:
                return
        if until is not None and until > self.now:
            self.now = until

    def pending(self) -> int:
        return len(self._queue)

    # -- verbs -------------------------------------------------------------

    def _region(self, dst: int, address: int, length: int) -> bytearray:
        region = self.nodes[dst].region
        if region is None or address < 0 or length < 0 or address + length > len(region):
            raise RegionBoundsError(f"[{address}, {address + length}) outside node {dst} region")
        return region

    def _issue(self, src: int, dst: int, kind: VerbKind, address: int, length: int,
               latency: int, payload: bytes | None = None) -> _Inflight:
        if not self.nodes[src].alive:
            raise NodeCrashed(src)
        issue = self.now
        complete = max(issue + latency, self._pair_last.get((src, dst), 0))
        self._pair_last[(src, dst)] = complete
        ev = FabricEvent(self.event_count, src, dst, kind, address, length, issue, complete)
        self.event_count += 1
        self.counters.add(src, kind, length)
        if self.record_trace:
            self.trace.append(ev)
        inflight = _Inflight(ev, payload)
        self._inflight.setdefault(dst, []).append(inflight)
        if src != dst:
            self._inflight.setdefault(src, []).append(inflight)
        for victim in self._event_triggers.pop(self.event_count, []):
            try:
                self.crash_now(victim)
            except NodeCrashed:
                self._finish(inflight, "src-crashed")
                raise
        return inflight

    def _finish(self, inflight: _Inflight, outcome: str) -> None:
        ev = inflight.event
        for n in {ev.src, ev.dst}:
            lst = self._inflight.get(n)
            if lst and inflight in lst:
                lst.remove(inflight)
        ev.outcome = outcome
        ev.done = self._done_count
        self._done_count += 1
        self._digest.update(
            f"{ev.seq}|{ev.src}|{ev.dst}|{ev.kind.value}|{ev.address}|{ev.length}|"
            f"{ev.issue_time}|{ev.complete_time}|{outcome}\n".encode()
        )

    def _await(self, inflight: _Inflight) -> None:
        ev = inflight.event
        src_node = self.nodes[ev.src]
        try:
            self.sleep(max(0, ev.complete_time - self.now))
        except NodeCrashed:
            self._finish(inflight, "src-crashed")
            raise
        if not src_node.alive:
            self._finish(inflight, "src-crashed")
            raise NodeCrashed(ev.src)
        if inflight.torn or not self.nodes[ev.dst].alive:
            self._finish(inflight, "torn" if inflight.torn else "unreachable")
            raise DestinationUnreachable(ev.dst)

    def _check_dst(self, src: int, dst: int, kind: VerbKind, address: int, length: int) -> None:
        if not self.nodes[dst].alive:
            inflight = self._issue(src, dst, kind, address, length, self.latency.rtt_ns)
            self._await(inflight)  # raises

    def read(self, src: int, dst: int, address: int, length: int) -> bytes:
        region = self._region(dst, address, length)
        self._check_dst(src, dst, VerbKind.READ, address, length)
        inflight = self._issue(src, dst, VerbKind.READ, address, length, self.latency.rtt_ns)
        self._await(inflight)
        data = bytes(region[address:address + length])
        self._finish(inflight, "ok")
        self._notify_read(dst, address, length, src)
        return data

    def write(self, src: int, dst: int, address: int, payload: bytes) -> None:
        payload = bytes(payload)
        region = self._region(dst, address, len(payload))
        self._check_dst(src, dst, VerbKind.WRITE, address, len(payload))
        inflight = self._issue(src, dst, VerbKind.WRITE, address, len(payload),
                               self.latency.rtt_ns + self.latency.nvm_write_ns, payload)
        self._await(inflight)
        region[address:address + len(payload)] = payload
        self._finish(inflight, "ok")
        handler = self.nodes[dst].handler
        if handler is not None:
            extra = handler.on_write(address, len(payload), src)
            if extra:
                self.sleep(extra)

    def cas64(self, src: int, dst: int, address: int, expected: int, swap: int) -> int:
        if address % 8:
            raise MisalignedAtomic(f"address {address} not 8-byte aligned")
        region = self._region(dst, address, 8)
        self._check_dst(src, dst, VerbKind.CAS64, address, 8)
        inflight = self._issue(src, dst, VerbKind.CAS64, address, 8, self.latency.rtt_ns)
        self._await(inflight)
        prior = _U64.unpack_from(region, address)[0]
        if prior == expected:
            _U64.pack_into(region, address, swap)
        self._finish(inflight, "swapped" if prior == expected else "failed")
        handler = self.nodes[dst].handler
        if handler is not None and prior == expected:
            extra = handler.on_write(address, 8, src)
            if extra:
                self.sleep(extra)
        return prior

    def atomic_read64(self, src: int, dst: int, address: int) -> int:
        if address % 8:
            raise MisalignedAtomic(f"address {address} not 8-byte aligned")
        region = self._region(dst, address, 8)
        self._check_dst(src, dst, VerbKind.ATOMIC_READ64, address, 8)
        inflight = self._issue(src, dst, VerbKind.ATOMIC_READ64, address, 8, self.latency.rtt_ns)
        self._await(inflight)
        value = _U64.unpack_from(region, address)[0]
        self._finish(inflight, "ok")
        return value

    def _notify_read(self, dst: int, address: int, length: int, src: int) -> None:
        handler = self.nodes[dst].handler
        hook = getattr(handler, "on_read", None)
        if hook is not None:
            hook(address, length, src)

    # -- crashes -----------------------------------------------------------

    def inject_crash(self, node_id: int, at_time: int | None = None, at_event: int | None = None) -> None:
        if node_id not in self.nodes:
            raise ConfigError(f"unknown node {node_id}")
        if (at_time is None) == (at_event is None):
            raise ConfigError("give exactly one of at_time / at_event")
        if at_time is not None:
            self.call_at(at_time, self.crash_now, node_id)
        else:
            if at_event <= self.event_count:
                raise ConfigError("event trigger already passed")
            self._event_triggers.setdefault(at_event, []).append(node_id)

    def crash_now(self, node_id: int) -> None:
        node = self.nodes[node_id]
        if not node.alive:
            return
        node.alive = False
        node.crash_time = self.now
        node.handler = None
        for inflight in list(self._inflight.get(node_id, [])):
            ev = inflight.event
            if ev.kind is VerbKind.WRITE and not inflight.torn and inflight.payload is not None:
                inflight.torn = True
                dst_region = self.nodes[ev.dst].region
                n = self.rng.randrange(0, len(inflight.payload)) if inflight.payload else 0
                if dst_region is not None:
                    dst_region[ev.address:ev.address + n] = inflight.payload[:n]
                self.local_log.append(("torn", self.now, ev.seq, n))
        for task in list(self._tasks.values()):
            if task.node == node_id and greenlet.getcurrent() is not task.glet:
                task.killed = True
                self._graveyard.append(task)
                del self._tasks[task.glet]
        for hook in list(self.crash_hooks):
            hook(node_id)
        current = self.current_task()
        if current is not None and current.node == node_id:
            raise NodeCrashed(node_id)

    def revive(self, node_id: int) -> None:
        node = self.nodes[node_id]
        node.alive = True
        node.epoch += 1
        node.crash_time = None

    # -- reporting ---------------------------------------------------------

    def trace_digest(self) -> str:
        return self._digest.copy().hexdigest()

    def export_trace(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for ev in self.trace:
                fh.write(json.dumps(ev.as_record(), sort_keys=True) + "\n")


# -- simulation script -------------------------------------------------------


@dataclass
class CrashSpec:
    node: int
    at_time: int | None = None
    at_event: int | None = None


@dataclass
class SimConfig:
    """Simulation script: latencies, seed and crash schedule.

    JSON document::

        {"seed": 7,
         "latency": {"rtt_ns": 2000, "nvm_write_ns": 200, "dram_read_ns": 0, "cpu_op_ns": 100},
         "crashes": [{"node": 1, "at_time": 50000}, {"node": 2, "at_event": 120}]}
    """

    seed: int = 0
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    crashes: list[CrashSpec] = field(default_factory=list)

    @classmethod
    def from_dict(cls, doc: dict) -> "SimConfig":
        unknown = set(doc) - {"seed", "latency", "crashes"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            latency = LatencyConfig(**doc.get("latency", {}))
            crashes = [CrashSpec(**c) for c in doc.get("crashes", [])]
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        for c in crashes:
            if (c.at_time is None) == (c.at_event is None):
                raise ConfigError("each crash needs exactly one of at_time / at_event")
        return cls(int(doc.get("seed", 0)), latency, crashes)

    @classmethod
    def load(cls, path: str | Path) -> "SimConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def build(self, record_trace: bool = True) -> Simulator:
        return Simulator(self.latency, self.seed, record_trace)

    def arm(self, sim: Simulator) -> None:
        for c in self.crashes:
            sim.inject_crash(c.node, at_time=c.at_time, at_event=c.at_event)
