"""Benchmark runs in simulated time: single runs, sweeps and the bank workload."""

from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field, replace

from ..cache import CacheStats
from ..cluster import Cluster, Topology
from ..errors import ConfigError, NodeCrashed
from ..fabric import VerbKind
from ..frontend import Mode
from ..recovery import check_structures, durable_content, recover_frontend
from ..structures import MAP_KINDS, Kind
from .workload import Model, WorkloadSpec, execute, generate_ops, key_source, preload_ops, value_matches

DS = 0
SWEEP_PARAMS = ("batch_size", "cache_capacity", "rr_set_size", "partitions", "readers")


@dataclass
class RunReport:
    name: str
    kind: str
    mode: str
    ops: int = 0
    sim_ns: int = 0
    throughput: float = 0.0  # operations per simulated second
    write_verbs: int = 0
    read_verbs: int = 0
    cas_verbs: int = 0
    verbs: dict = field(default_factory=dict)
    cache_miss_ratio: float = 0.0
    retry_ratio: float = 0.0
    reader_ops: int = 0
    reader_throughput: float = 0.0  # per reader
    recovery: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)
    trace_digest: str = ""

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def per_second(ops: int, ns: int) -> float:
    return ops * 1e9 / ns if ns > 0 else 0.0


TABLE_COLS = (
    ("name", 18, "{}"), ("kind", 8, "{}"), ("mode", 5, "{}"), ("ops", 8, "{}"),
    ("sim_ms", 10, "{:.3f}"), ("throughput", 12, "{:.0f}"), ("W", 8, "{}"), ("R", 8, "{}"),
    ("miss", 6, "{:.3f}"), ("retry", 6, "{:.3f}"), ("ok", 3, "{}"),
)


def format_table(reports: list[RunReport]) -> str:
    head = " ".join(f"{name:>{w}}" for name, w, _ in TABLE_COLS)
    lines = [head]
    for r in reports:
        vals = dict(name=r.name, kind=r.kind, mode=r.mode, ops=r.ops, sim_ms=r.sim_ns / 1e6,
                    throughput=r.throughput, W=r.write_verbs, R=r.read_verbs,
                    miss=r.cache_miss_ratio, retry=r.retry_ratio, ok="y" if r.ok else "N")
        lines.append(" ".join(f"{fmt.format(vals[name]):>{w}}" for name, w, fmt in TABLE_COLS))
    return "\n".join(lines)


def small_topology(n_backends: int = 1, mirrors: int = 0, n_fe: int = 8) -> Topology:
    return Topology(n_frontends=n_fe, n_backends=n_backends, mirrors=mirrors, n_fe_slots=n_fe)


def footprint_per_item(kind: Kind, probe: int = 512, seed: int = 0) -> float:
    """Back-end bytes per stored item, measured on a throwaway cluster."""
    spec = WorkloadSpec(kind=kind, mode=Mode.RCB, ops=0, keys=probe * 4, preload=probe, seed=seed)
    c = Cluster(Topology(), seed=seed, record_trace=False)
    fe = c.frontend(0, spec.frontend_config(cache=False))
    h = fe.create(DS, kind)
    base = _allocated_bytes(c)
    for op in preload_ops(spec):
        execute(fe, h, op)
    fe.drain()
    c.quiesce()
    return (_allocated_bytes(c) - base) / probe


def _allocated_bytes(c: Cluster) -> int:
    total = 0
    for node in c.backends.values():
        total += (len(node.allocated_blocks()) - node.layout.root_blocks) * node.layout.block_size
    return total


def expected_items(spec: WorkloadSpec) -> float:
    puts = spec.ops * spec.put_ratio / 100 * spec.writers
    if spec.kind not in MAP_KINDS:
        return spec.preload + puts
    space = spec.keys * spec.writers
    fresh = space - spec.preload
    return spec.preload + fresh * (1 - math.exp(-puts / space)) if space else 0


def cache_pages_for(spec: WorkloadSpec, page_size: int) -> int:
    if spec.cache_pages is not None:
        return spec.cache_pages
    size = footprint_per_item(spec.kind, seed=spec.seed) * max(expected_items(spec), 1)
    return max(8, int(spec.cache_fraction * size / page_size))


def run(spec: WorkloadSpec, topo: Topology | None = None, name: str = "run",
        trace_path: str | None = None) -> RunReport:
    """One measured run; throughput = operations / simulated elapsed time."""
    record_trace = trace_path is not None
    spec.validate()
    n_fe = spec.writers + spec.readers
    topo = topo or small_topology(spec.n_backends, spec.mirrors, max(n_fe, 2))
    if topo.n_frontends < n_fe:
        raise ConfigError("topology has too few front-ends for the workload")
    c = Cluster(topo, seed=spec.seed, record_trace=record_trace)
    sim = c.sim
    cfg = spec.frontend_config()
    writers = [c.frontend(k, cfg) for k in range(spec.writers)]
    h = writers[0].create(DS, spec.kind, n_parts=spec.partitions)
    handles = [h] + [w.open(DS) for w in writers[1:]]
    readers = [c.frontend(spec.writers + k, spec.frontend_config(cache=False)) for k in range(spec.readers)]
    rhandles = [r.open(DS) for r in readers]
    model = Model(spec.kind)
    for op in preload_ops(spec):
        execute(writers[0], h, op)
        model.apply(op)
    writers[0].drain()
    c.quiesce()

    pages = cache_pages_for(spec, cfg.page_size) if cfg.cache else 0
    for w in writers:
        if w.cache is not None:
            w.purge_cache()
            w.cache.capacity = pages
            w.cache.stats = CacheStats()
    plans = [generate_ops(spec, k) for k in range(spec.writers)]
    report = RunReport(name, spec.kind.name, spec.mode.value, params=spec.as_dict())
    report.params["cache_pages"] = pages
    if spec.distribution == "zipf":
        report.params["keys_source"] = "seeded power-law generator (stands in for a production trace)"
    sim.counters.reset()
    start = sim.now
    finished = [0] * spec.writers
    violations = report.violations

    def writer_body(k):
        fe, hk = writers[k], handles[k]
        for op in plans[k]:
            got = execute(fe, hk, op)
            if op[0] == "find" and not value_matches(op[1], got):
                violations.append(f"writer {k} read {got} for key {op[1]}")
        fe.drain()
        finished[k] = sim.now

    reader_done = [0] * spec.readers
    reader_time = [0] * spec.readers

    def reader_body(j):
        fe, hj = readers[j], rhandles[j]
        keys = key_source(spec.distribution, spec.keys, spec.seed * 97 + j, spec.zipf_s)
        t0 = sim.now
        while True:
            if spec.reader_ops and reader_done[j] >= spec.reader_ops:
                break
            if not spec.reader_ops and all(finished):
                break
            k = keys.next() * spec.writers + reader_done[j] % spec.writers
            got = fe.reader_find(hj, k)
            if not value_matches(k, got):
                violations.append(f"reader {j} saw {got} for key {k}")
            reader_done[j] += 1
        reader_time[j] = sim.now - t0

    tasks = [sim.spawn(reader_body, j, node=readers[j].id, name=f"reader{j}") for j in range(spec.readers)]
    if spec.writers == 1:
        writer_body(0)
    else:
        tasks += [sim.spawn(writer_body, k, node=writers[k].id, name=f"writer{k}") for k in range(spec.writers)]
    while not all(t.done for t in tasks):
        sim.sleep(1000)
    for t in tasks:
        if t.error is not None:
            raise t.error
    end = max(finished) if spec.ops else start
    report.ops = spec.ops * spec.writers
    report.sim_ns = end - start
    report.throughput = per_second(report.ops, report.sim_ns)
    ids = [w.id for w in writers]
    report.write_verbs = sum(sim.counters.count(i, VerbKind.WRITE) for i in ids)
    report.read_verbs = sum(sim.counters.count(i, VerbKind.READ) for i in ids)
    report.cas_verbs = sum(sim.counters.count(i, VerbKind.CAS64) for i in ids)
    report.verbs = sim.counters.snapshot()
    caches = [w.cache.stats for w in writers if w.cache is not None]
    hits = sum(s.hits for s in caches)
    misses = sum(s.misses for s in caches)
    report.cache_miss_ratio = misses / (hits + misses) if hits + misses else 0.0
    attempts = sum(r.read_stats.attempts for r in readers)
    retries = sum(r.read_stats.retries for r in readers)
    report.retry_ratio = retries / attempts if attempts else 0.0
    report.reader_ops = sum(reader_done)
    if spec.readers:
        report.reader_throughput = sum(per_second(n, t) for n, t in zip(reader_done, reader_time)) / spec.readers

    c.quiesce()
    for plan in plans:
        for op in plan:
            model.apply(op)
    got = durable_content(c.backends, DS)
    if got != model.state():
        violations.append("durable state differs from the reference model")
    violations += check_structures(c.backends)
    report.trace_digest = sim.trace_digest()
    if trace_path is not None:
        sim.export_trace(trace_path)
    return report


def sweep(spec: WorkloadSpec, parameter: str, values, topo: Topology | None = None) -> list[RunReport]:
    """One run per value of ``parameter``."""
    if parameter not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMS}")
    out = []
    for v in values:
        if parameter == "batch_size":
            s = replace(spec, mode=Mode.RCB, batch_size=int(v))
        elif parameter == "cache_capacity":
            s = replace(spec, cache_pages=int(v))
        elif parameter == "partitions":
            s = replace(spec, partitions=int(v))
        else:
            s = replace(spec, **{parameter: int(v)})
        out.append(run(s, topo, name=f"{parameter}={v}"))
    return out


def bank(accounts: int = 100, txs: int = 10_000, index: str = "hash", mode: Mode | str = Mode.RCB,
         seed: int = 0, crash_at: int | None = None, initial: int = 1000) -> RunReport:
    """Transfers between accounts in one map; checks that money is conserved.

    ``crash_at`` crashes the front-end that many fabric events into the
    transfer phase; it is recovered and the remaining transfers continue.
    """
    kind = {"hash": Kind.HASH, "bpt": Kind.BPT}.get(index)
    if kind is None:
        raise ConfigError("index must be 'hash' or 'bpt'")
    if accounts < 1:
        raise ConfigError("need at least one account")
    spec = WorkloadSpec(kind=kind, mode=Mode(mode), ops=txs, keys=accounts, seed=seed)
    c = Cluster(small_topology(), seed=seed)
    sim = c.sim
    cfg = spec.frontend_config()
    fe = c.frontend(0, cfg)
    h = fe.create(DS, kind)
    model = Model(kind)
    for a in range(accounts):
        op = ("insert", a, initial)
        execute(fe, h, op)
        model.apply(op)
    fe.drain()
    rng = random.Random(seed)
    plan = [("transfer", rng.randrange(accounts), rng.randrange(accounts), rng.randrange(1, 2 * initial // 5))
            for _ in range(txs)]
    report = RunReport("bank", kind.name, spec.mode.value,
                       params=dict(accounts=accounts, txs=txs, index=index, seed=seed, crash_at=crash_at))
    total = accounts * initial
    sim.counters.reset()
    start = sim.now
    if crash_at is not None:
        sim.inject_crash(fe.id, at_event=sim.event_count + crash_at)
    done = 0
    while done < len(plan):
        try:
            execute(fe, h, plan[done])
            done += 1
            if done == len(plan):
                fe.drain()
        except NodeCrashed:
            fe, rep = recover_frontend(sim, c.backends, fe.id, cfg)
            h = fe.open(DS)
            fe.drain()
            c.quiesce()
            report.recovery = rep.as_dict()
            got = durable_content(c.backends, DS)
            base = Model(kind)
            for a in range(accounts):
                base.apply(("insert", a, initial))
            candidates = []
            for n in (done, done + 1):
                m = Model(kind)
                m.map = dict(base.map)
                m.run(plan[:n])
                candidates.append(m.state())
            if got not in candidates:
                report.violations.append("recovered state is not a prefix of the transfers")
            else:
                done = candidates.index(got) + done
            if sum(v for _, v in got) != total:
                report.violations.append("balance not conserved across recovery")
    end = sim.now
    c.quiesce()
    for op in plan:
        model.apply(op)
    got = durable_content(c.backends, DS)
    if sum(v for _, v in got) != total:
        report.violations.append(f"total balance {sum(v for _, v in got)} != {total}")
    if got != model.state():
        report.violations.append("durable state differs from the reference model")
    report.violations += check_structures(c.backends)
    report.ops = txs
    report.sim_ns = end - start
    report.throughput = per_second(txs, report.sim_ns)
    report.write_verbs = sim.counters.count(fe.id, VerbKind.WRITE)
    report.read_verbs = sim.counters.count(fe.id, VerbKind.READ)
    report.cas_verbs = sim.counters.count(fe.id, VerbKind.CAS64)
    report.verbs = sim.counters.snapshot()
    report.trace_digest = sim.trace_digest()
    return report
