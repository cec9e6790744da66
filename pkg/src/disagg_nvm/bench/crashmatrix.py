"""Scripted crash points across structures, phases and recovery paths.

Each point runs a short seeded workload, crashes one node at a chosen fabric
event (or during replay), runs the matching recovery and compares the
durable state with the reference model:

* front-end crash: the state right after recovery must equal the model after
  the acknowledged operations, or after one more (an op whose log write
  landed just before the crash);
* back-end crash: the front-end carries on after recovery, so the final
  state must equal the model after every operation.

The allocator is checked too: allocated blocks must equal the reachable set.
"""

from __future__ import annotations

import hashlib
import json
import random
from collections import Counter
from dataclasses import asdict, dataclass, field

from ..cluster import Cluster, Topology
from ..errors import ConfigError, NvmError
from ..fabric import VerbKind
from ..frontend import FrontendConfig, Mode
from ..recovery import (check_structures, durable_content, orphan_sweep, reachable_blocks,
                        recover_backend, recover_frontend)
from ..structures import Kind
from .workload import Model, execute, value_for

DS = 0
BACKEND = 0
PHASES = ("oplog", "record", "lock", "meta", "read", "replay")


@dataclass
class CrashPoint:
    label: str
    node: str  # "frontend" or "backend"
    phase: str
    kind: Kind
    mode: Mode
    seed: int = 0
    at_event: int | None = None
    at_time: int | None = None


@dataclass
class CaseResult:
    label: str
    node: str
    phase: str
    case: str
    ok: bool
    detail: str = ""
    reexecuted: int = 0
    replayed: int = 0
    orphans: int = 0


@dataclass
class MatrixReport:
    cases: int = 0
    passed: int = 0
    crashed: int = 0
    failures: list = field(default_factory=list)
    by_case: dict = field(default_factory=dict)
    by_phase: dict = field(default_factory=dict)
    by_kind: dict = field(default_factory=dict)
    digest: str = ""

    @property
    def ok(self) -> bool:
        return self.passed == self.cases

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def matrix_topology() -> Topology:
    return Topology(n_frontends=1, n_backends=1, capacity=1 << 20, log_len=32 << 10,
                    oplog_slots=256, n_fe_slots=2)


def matrix_config(mode: Mode) -> FrontendConfig:
    batch = {Mode.RCB: 8}.get(mode)
    cfg = FrontendConfig.for_mode(mode, sole_writer=True, cache_capacity=16, reclaim_delay_us=5)
    if batch:
        cfg.batch_size = batch
    return cfg


def matrix_ops(kind: Kind, n: int, seed: int) -> list[tuple]:
    rng = random.Random(seed)
    out = []
    for i in range(n):
        r = rng.random()
        if kind is Kind.STACK:
            out.append(("push", value_for(i, seed)) if r < 0.6 else ("pop",))
        elif kind is Kind.QUEUE:
            out.append(("enqueue", value_for(i, seed)) if r < 0.6 else ("dequeue",))
        else:
            k = rng.randrange(24)
            out.append(("insert", k, value_for(k, i)) if r < 0.7 else ("delete", k))
    return out


def _classify(ev, layout) -> str:
    if ev.kind is VerbKind.CAS64:
        return "lock"
    if ev.kind is not VerbKind.WRITE:
        return "read"
    if layout.oplog_areas_off <= ev.address < layout.oplog_areas_off + layout.n_fe * layout.oplog_slots * layout.oplog_slot_size:
        return "oplog"
    if layout.log_areas_off <= ev.address < layout.log_areas_off + layout.n_fe * layout.log_len:
        return "record"
    return "meta"


def _setup(kind: Kind, mode: Mode, seed: int, record_trace: bool = False):
    c = Cluster(matrix_topology(), seed=seed, record_trace=record_trace)
    fe = c.frontend(0, matrix_config(mode))
    h = fe.create(DS, kind)
    return c, fe, h


def dry_run(kind: Kind, mode: Mode, seed: int, n_ops: int):
    """Events of a crash-free run, labelled by phase, plus replay start times."""
    c, fe, h = _setup(kind, mode, seed, record_trace=True)
    first = c.sim.event_count
    for op in matrix_ops(kind, n_ops, seed):
        execute(fe, h, op)
    fe.drain()
    lay = c.backends[BACKEND].layout
    events = [(ev.seq + 1, _classify(ev, lay)) for ev in c.sim.trace if ev.seq >= first]
    replays = [t for (tag, t, *_rest) in c.sim.local_log if tag == "apply-begin"]
    return events, replays


def plan_points(kinds=None, modes=None, total: int = 1024, seed: int = 0, n_ops: int = 48) -> list[CrashPoint]:
    """Spread ``total`` crash points over kinds x modes x {frontend, backend} x phase."""
    kinds = [Kind(k) for k in (kinds or list(Kind))]
    modes = [Mode(m) for m in (modes or list(Mode))]
    n_cells = len(kinds) * len(modes) * 2
    base, extra = divmod(total, n_cells)
    # cell i gets one more point than the rest while i < extra
    counts = iter([base + (i < extra) for i in range(n_cells)])
    rng = random.Random(seed)
    points = []
    for kind in kinds:
        for mode in modes:
            case_seed = rng.randrange(1 << 30)
            quota = {"frontend": next(counts), "backend": next(counts)}
            if not any(quota.values()):
                continue
            events, replays = dry_run(kind, mode, case_seed, n_ops)
            by_phase: dict[str, list[int]] = {}
            for idx, phase in events:
                by_phase.setdefault(phase, []).append(idx)
            for node in ("frontend", "backend"):
                pools = [(p, [("e", i) for i in by_phase[p]]) for p in PHASES if by_phase.get(p)]
                if node == "backend" and replays:
                    pools.append(("replay", [("t", t + 1) for t in replays]))
                if node == "frontend":
                    pools = [(p, pool) for p, pool in pools if p != "read"] or pools
                off = rng.randrange(len(pools))
                for j in range(quota[node]):
                    phase, pool = pools[(j + off) % len(pools)]
                    how, at = pool[rng.randrange(len(pool))]
                    label = f"{kind.name}/{mode.value}/{node}:{phase}@{how}{at}"
                    points.append(CrashPoint(label, node, phase, kind, mode, case_seed,
                                             at if how == "e" else None, at if how == "t" else None))
    return points


def run_point(p: CrashPoint, n_ops: int = 48) -> CaseResult:
    c, fe, h = _setup(p.kind, p.mode, p.seed)
    sim = c.sim
    cfg = fe.cfg
    victim = fe.id if p.node == "frontend" else BACKEND
    if p.at_event is not None:
        if p.at_event <= sim.event_count:
            raise ConfigError(f"{p.label}: crash event precedes the workload")
        sim.inject_crash(victim, at_event=p.at_event)
    else:
        sim.inject_crash(victim, at_time=p.at_time)
    ops = matrix_ops(p.kind, n_ops, p.seed)
    res = CaseResult(p.label, p.node, p.phase, "none", True)
    problems = []
    i = 0
    while i <= len(ops):
        before = fe.stats.writes
        try:
            if i < len(ops):
                execute(fe, h, ops[i])
            else:
                fe.drain()
            i += 1
            continue
        except NvmError as exc:
            err = exc
        if not sim.is_alive(fe.id):
            fe, rep = recover_frontend(sim, c.backends, fe.id, cfg, sweep_with=[])
            h = fe.open(DS)
            fe.drain()
            c.quiesce()
            res.case, res.reexecuted, res.orphans = rep.case, rep.ops_reexecuted, rep.orphans_reclaimed
            got = durable_content(c.backends, DS)
            m = Model(p.kind)
            m.run(ops[:i])
            if got != m.state():
                if i < len(ops):
                    m.apply(ops[i])
                if i == len(ops) or got != m.state():
                    problems.append(f"front-end recovery state not a prefix at op {i}")
                    break
                i += 1
        elif not sim.is_alive(BACKEND):
            node, rep = recover_backend(sim, BACKEND, frontends=[fe])
            c.backends[BACKEND] = node
            fe.backend_recovered(BACKEND)
            res.case, res.replayed, res.orphans = rep.case, rep.records_replayed, rep.orphans_reclaimed
            if i < len(ops) and fe.stats.writes > before:
                i += 1
        else:
            problems.append(f"unexpected error without a crash: {err!r}")
            break
    if not problems:
        c.quiesce()
        m = Model(p.kind)
        m.run(ops)
        if durable_content(c.backends, DS) != m.state():
            problems.append("final state differs from the reference model")
        problems += check_structures(c.backends)
        for node in c.backends.values():
            reach = reachable_blocks(node, [fe])
            lost = reach - set(node.allocated_blocks())
            if lost:
                problems.append(f"{len(lost)} reachable blocks marked free")
            # blocks emptied by retiring another incarnation's extents come back here
            res.orphans += len(orphan_sweep(node, [fe]))
            leaked = set(node.allocated_blocks()) - reachable_blocks(node, [fe])
            if leaked:
                problems.append(f"{len(leaked)} allocated blocks unreachable after the sweep")
    res.ok = not problems
    res.detail = "; ".join(problems)
    return res


def crash_matrix(kinds=None, modes=None, total: int = 1024, seed: int = 0, n_ops: int = 48,
                 points: list[CrashPoint] | None = None, progress=None) -> MatrixReport:
    points = points if points is not None else plan_points(kinds, modes, total, seed, n_ops)
    report = MatrixReport()
    digest = hashlib.sha256()
    by_case, by_phase, by_kind = Counter(), Counter(), Counter()
    for p in points:
        r = run_point(p, n_ops)
        report.cases += 1
        report.passed += r.ok
        report.crashed += r.case != "none"
        by_case[r.case] += 1
        by_phase[f"{r.node}:{r.phase}"] += 1
        by_kind[p.kind.name] += 1
        if not r.ok:
            report.failures.append(asdict(r))
        digest.update(json.dumps(asdict(r), sort_keys=True).encode())
        if progress is not None:
            progress(r)
    report.by_case = dict(sorted(by_case.items()))
    report.by_phase = dict(sorted(by_phase.items()))
    report.by_kind = dict(sorted(by_kind.items()))
    report.digest = digest.hexdigest()
    return report


def load_script(path) -> list[CrashPoint]:
    """Read a JSON list of crash points.

    Each entry: ``{"kind", "mode", "node", "phase", "seed"?, "nth"?}`` picks
    the nth event of that phase from a dry run; ``at_event``/``at_time`` pin
    the point directly.
    """
    with open(path) as f:
        doc = json.load(f)
    out = []
    for i, e in enumerate(doc):
        kind = Kind[e["kind"].upper()] if isinstance(e["kind"], str) else Kind(e["kind"])
        mode = Mode(e.get("mode", "RCB"))
        node = e["node"]
        if node not in ("frontend", "backend"):
            raise ConfigError(f"entry {i}: node must be 'frontend' or 'backend'")
        seed = int(e.get("seed", i))
        phase = e.get("phase", "any")
        at_event, at_time = e.get("at_event"), e.get("at_time")
        if at_event is None and at_time is None:
            events, replays = dry_run(kind, mode, seed, int(e.get("ops", 48)))
            nth = int(e.get("nth", 0))
            if phase == "replay":
                if nth >= len(replays):
                    raise ConfigError(f"entry {i}: only {len(replays)} replay points")
                at_time = replays[nth] + 1
            else:
                pool = [idx for idx, ph in events if phase in ("any", ph)]
                if nth >= len(pool):
                    raise ConfigError(f"entry {i}: only {len(pool)} '{phase}' events")
                at_event = pool[nth]
        label = e.get("label") or f"{kind.name}/{mode.value}/{node}:{phase}#{i}"
        out.append(CrashPoint(label, node, phase, kind, mode, seed, at_event, at_time))
    return out


__all__ = ["CaseResult", "CrashPoint", "MatrixReport", "PHASES", "crash_matrix", "dry_run",
           "load_script", "matrix_ops", "plan_points", "run_point"]
