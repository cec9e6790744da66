"""Topology builder: back-ends, optional mirrors and front-ends on one simulator."""

from __future__ import annotations

from dataclasses import dataclass, field

from .backend import BackendNode
from .fabric import LatencyConfig, Simulator
from .frontend import FrontEnd, FrontendConfig

BACKEND_BASE = 0
MIRROR_BASE = 50
FRONTEND_BASE = 100


@dataclass
class Topology:
    n_frontends: int = 1
    n_backends: int = 1
    mirrors: int = 0  # mirrors per back-end
    mirror_nvm: bool = True
    capacity: int = 8 << 20
    block_size: int = 1024
    log_len: int = 256 * 1024
    oplog_slots: int = 2048
    n_fe_slots: int = 8
    track_uaf: bool = False
    plan: dict = field(default_factory=dict)

    def plan_kw(self) -> dict:
        kw = dict(n_fe=self.n_fe_slots, block_size=self.block_size, log_len=self.log_len,
                  oplog_slots=self.oplog_slots)
        kw.update(self.plan)
        return kw


class Cluster:
    def __init__(self, topo: Topology | None = None, *, seed: int = 0,
                 latency: LatencyConfig | None = None, record_trace: bool = False,
                 sim: Simulator | None = None):
        self.topo = topo or Topology()
        self.sim = sim or Simulator(latency, seed=seed, record_trace=record_trace)
        self.backends: dict[int, BackendNode] = {}
        self.mirrors: dict[int, list[int]] = {}
        self.mirror_nodes: dict[int, BackendNode] = {}
        self.frontends: dict[int, FrontEnd] = {}
        t = self.topo
        for i in range(t.n_backends):
            be = BACKEND_BASE + i
            self.sim.add_node(be, t.capacity, name=f"backend{i}")
            node = BackendNode.format(self.sim, be, track_uaf=t.track_uaf, **t.plan_kw())
            self.backends[be] = node
            self.mirrors[be] = []
            for j in range(t.mirrors):
                mid = MIRROR_BASE + i * 4 + j
                self.sim.add_node(mid, t.capacity, name=f"mirror{i}.{j}")
                mirror = BackendNode.format(self.sim, mid, role="mirror", has_nvm=t.mirror_nvm,
                                            **t.plan_kw())
                node.attach_mirror(mirror)
                mirror.start()
                self.mirrors[be].append(mid)
                self.mirror_nodes[mid] = mirror
            node.start()
        for k in range(t.n_frontends):
            self.sim.add_node(FRONTEND_BASE + k, 0, name=f"frontend{k}")

    @property
    def backend_ids(self) -> list[int]:
        return sorted(self.backends)

    @property
    def frontend_ids(self) -> list[int]:
        return [FRONTEND_BASE + k for k in range(self.topo.n_frontends)]

    def attach(self, fe: int) -> None:
        for node in self.backends.values():
            node.attach(fe)

    def frontend(self, k: int = 0, config: FrontendConfig | None = None) -> FrontEnd:
        """Attach front-end ``k`` to every back-end and open a runtime for it."""
        fe = FRONTEND_BASE + k
        self.attach(fe)
        rt = FrontEnd(self.sim, fe, self.backend_ids, config)
        self.frontends[fe] = rt
        return rt

    def quiesce(self, limit_ns: int = 10**10) -> None:
        """Run the clock until every back-end and mirror has replayed its logs."""
        nodes = list(self.backends.values()) + list(self.mirror_nodes.values())
        deadline = self.sim.now + limit_ns
        while not all(n.quiescent() for n in nodes if self.sim.is_alive(n.id)):
            if self.sim.now >= deadline:
                raise TimeoutError("back-ends did not quiesce")
            self.sim.sleep(1000)
