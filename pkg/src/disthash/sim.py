"""Deterministic discrete-event engine: virtual clock, ordered message
delivery with locality-sensitive latency, crash/rejoin fault injection,
and the per-request step accounting that makes the search cost model
checkable.

Determinism contract: identical scenario + seed produce byte-identical
traces and metrics. Events are processed in (time, seq) order; latency
is a pure function of the endpoint localities; nothing in the engine
draws randomness. Set iteration is always sorted so output does not
depend on the interpreter's hash seed.
"""
from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass, field

from .catalogue import clog2
from .core import LocalityDescriptor, NodeId, proximity_rank

MS = 1000  # sim-time is integer microseconds


class SimError(Exception):
    pass


class UnknownNode(SimError):
    pass


class NotCrashed(SimError):
    pass


class UnknownRequest(SimError):
    pass


@dataclass(frozen=True)
class NetworkModel:
    """Latency = base + penalty per missing proximity tier. Pure in the
    endpoint localities, hence deterministic."""

    base_us: int = 5 * MS
    tier_penalty_us: int = 10 * MS

    def latency(self, src: LocalityDescriptor, dst: LocalityDescriptor) -> int:
        return self.base_us + self.tier_penalty_us * (4 - proximity_rank(src, dst))


@dataclass(kw_only=True)
class SendFailed:
    """Engine notification: a message addressed to a crashed node. The
    sender learns after one round trip, like a refused connection."""

    original: object
    dead: NodeId
    request_id: str | None = None
    hop: int = 0


# ---------------------------------------------------------------------
# Step accounting


@dataclass
class ClusterTally:
    """Per-cluster observation for one search request."""

    m_keys: int = 0        # keys in the catalogue at lookup time
    key_steps: int = 0     # comparisons actually charged for the lookup
    p: int = 0             # matches in this cluster
    id_steps: int = 0      # id + owner retrievals (2 per match)
    fetch_steps: int = 0   # request/response shares (2 per object fetched)
    probe_steps: int = 0   # per-object hash probe at the serving agent
    l_max: int = 0         # largest replica store touched
    fetch_requests: int = 0
    agents_contacted: set = field(default_factory=set)


@dataclass
class SearchAccounting:
    measured: int
    bound: int
    decomposed: int
    bound_applicable: bool  # every contacted cluster had M >= 1 and P >= 1
    clusters: int


class StepCounter:
    """Per-request tallies of the accounted operation classes. The
    catalogue's derived owner cache costs zero steps; only key
    comparisons, id/owner retrievals, fetch messages and replica probes
    are charged."""

    def __init__(self):
        self.requests: dict[str, dict[str, ClusterTally]] = {}
        self.messages: dict[str, int] = {}
        self.totals: dict[str, int] = {}

    def _cluster(self, request_id: str, cluster: str) -> ClusterTally:
        return self.requests.setdefault(request_id, {}).setdefault(cluster, ClusterTally())

    def on_lookup(self, request_id: str, cluster: str, m_keys: int, key_steps: int, matches: int) -> None:
        t = self._cluster(request_id, cluster)
        t.m_keys = max(t.m_keys, m_keys)
        t.key_steps += key_steps
        t.p += matches
        t.id_steps += 2 * matches
        self.totals[request_id] = self.totals.get(request_id, 0) + key_steps + 2 * matches

    def on_fetch_request(self, request_id: str, cluster: str, agent: NodeId, n_objects: int) -> None:
        t = self._cluster(request_id, cluster)
        t.fetch_requests += 1
        t.agents_contacted.add(agent)
        t.fetch_steps += 2 * n_objects
        self.totals[request_id] = self.totals.get(request_id, 0) + 2 * n_objects

    def on_probe(self, request_id: str, cluster: str, store_size: int, n_objects: int) -> None:
        t = self._cluster(request_id, cluster)
        t.l_max = max(t.l_max, store_size)
        steps = n_objects * clog2(store_size)
        t.probe_steps += steps
        self.totals[request_id] = self.totals.get(request_id, 0) + steps

    def on_message(self, request_id: str) -> None:
        self.messages[request_id] = self.messages.get(request_id, 0) + 1

    def message_count(self, request_id: str) -> int:
        return self.messages.get(request_id, 0)

    def account_search(self, request_id: str) -> SearchAccounting:
        if request_id not in self.requests:
            raise UnknownRequest(request_id)
        clusters = self.requests[request_id]
        measured = self.totals.get(request_id, 0)
        decomposed = sum(
            t.key_steps + t.id_steps + t.fetch_steps + t.probe_steps
            for t in clusters.values()
        )
        bound = formula_bound(
            [(t.m_keys, t.p, t.l_max) for t in clusters.values()]
        )
        applicable = bool(clusters) and all(
            t.m_keys >= 1 and t.p >= 1 for t in clusters.values()
        )
        return SearchAccounting(measured, bound, decomposed, applicable, len(clusters))


def formula_bound(per_cluster: list[tuple[int, int, int]]) -> int:
    """The closed-form step bound R * M * (4P + ceil(log2 L)) evaluated
    over observed per-cluster (M, P, L) values, taking the largest of
    each across the contacted clusters."""
    if not per_cluster:
        return 0
    r = len(per_cluster)
    m = max(c[0] for c in per_cluster)
    p = max(c[1] for c in per_cluster)
    l = max(c[2] for c in per_cluster)
    return r * m * (4 * p + clog2(l))


def ideal_search_steps(total_objects: int, total_agents: int, clusters: int = 1) -> int:
    """The bound under the uniform idealization: objects evenly divided
    among clusters, one match per exact-type criterion, every agent
    holding 2B/N objects. Collapses to B * (4 + log2(2B/N))."""
    b, n, r = total_objects, total_agents, clusters
    if b % r:
        raise ValueError("idealization requires clusters to divide the object count")
    m = b // r              # keys per cluster catalogue
    l = (2 * b) // n        # objects per agent
    return formula_bound([(m, 1, l)] * r)


# ---------------------------------------------------------------------
# Event queue


@dataclass
class _Deliver:
    src: NodeId
    dst: NodeId
    msg: object


@dataclass
class _Timer:
    node: NodeId
    tag: str
    payload: object = None


@dataclass
class _Crash:
    node: NodeId


@dataclass
class _Rejoin:
    node: NodeId


@dataclass
class TraceRecord:
    time: int
    seq: int
    node: str
    kind: str
    detail: str

    def line(self) -> str:
        digest = hashlib.blake2b(self.detail.encode(), digest_size=6).hexdigest()
        return f"{self.time} {self.seq} {self.node} {self.kind} {digest}"


class Simulator:
    """Single-threaded engine. Nodes are registered state machines; all
    interaction between them goes through ``send``/``set_timer``."""

    def __init__(self, network: NetworkModel | None = None, seed: int = 0):
        self.network = network or NetworkModel()
        self.seed = seed
        self.clock = 0
        self._seq = 0
        self._heap: list[tuple[int, int, object]] = []
        self.nodes: dict[NodeId, object] = {}
        self.crashed: set[NodeId] = set()
        self.trace: list[TraceRecord] = []
        self.steps = StepCounter()
        self.deliver_count = 0
        # event sinks filled by the node machines, drained by the runner
        self.member_events: list[tuple] = []
        self.loss_records: list[tuple] = []
        self.op_records: list[dict] = []
        self._lost_clusters: set[NodeId] = set()

    # -- registration --------------------------------------------------

    def add_node(self, node) -> None:
        if node.node_id in self.nodes:
            raise ValueError(f"duplicate node {node.node_id}")
        self.nodes[node.node_id] = node

    def is_alive(self, node_id: NodeId) -> bool:
        return node_id in self.nodes and node_id not in self.crashed

    # -- scheduling ----------------------------------------------------

    def _push(self, time: int, ev) -> None:
        heapq.heappush(self._heap, (time, self._seq, ev))
        self._seq += 1

    def send(self, src: NodeId, dst: NodeId, msg) -> None:
        if src in self.crashed:
            return
        if dst not in self.nodes:
            raise UnknownNode(dst)
        lat = self.network.latency(self.nodes[src].locality, self.nodes[dst].locality)
        self._push(self.clock + lat, _Deliver(src, dst, msg))

    def set_timer(self, node: NodeId, tag: str, delay: int, payload=None) -> None:
        self._push(self.clock + delay, _Timer(node, tag, payload))

    def inject_crash(self, node: NodeId, at: int) -> None:
        if node not in self.nodes:
            raise UnknownNode(node)
        self._push(at, _Crash(node))

    def inject_rejoin(self, node: NodeId, at: int) -> None:
        if node not in self.nodes:
            raise UnknownNode(node)
        self._push(at, _Rejoin(node))

    # -- event sinks ---------------------------------------------------

    def record_member_event(self, event: str, cluster: NodeId, node: NodeId, detail: str = "") -> None:
        self.member_events.append((self.clock, event, cluster, node, detail))

    def record_loss(self, oid, detail: str = "") -> None:
        self.loss_records.append((self.clock, oid, detail))

    def record_cluster_lost(self, ragent: NodeId, reporter: NodeId) -> None:
        # many members may report the same dead cluster; keep one record
        if ragent in self._lost_clusters:
            return
        self._lost_clusters.add(ragent)
        self.record_member_event("cluster_lost", ragent, reporter, "no-surviving-secondary")

    def record_op(self, **fields) -> None:
        fields.setdefault("time", self.clock)
        self.op_records.append(fields)

    # -- execution -----------------------------------------------------

    def run_until(self, t: int) -> None:
        if t < self.clock:
            raise ValueError("cannot run backwards")
        while self._heap and self._heap[0][0] <= t:
            time, seq, ev = heapq.heappop(self._heap)
            self.clock = time
            self._dispatch(seq, ev)
        self.clock = t

    def _trace(self, seq: int, node: NodeId, kind: str, detail: str) -> None:
        self.trace.append(TraceRecord(self.clock, seq, node.value, kind, detail))

    def _dispatch(self, seq: int, ev) -> None:
        if isinstance(ev, _Deliver):
            name = type(ev.msg).__name__
            rid = getattr(ev.msg, "request_id", None)
            if ev.dst in self.crashed:
                self._trace(seq, ev.dst, "drop", f"{name}:{rid or ''}")
                # bounce a failure notice to a live, non-engine sender;
                # pushed directly because the nominal source is dead
                if ev.src not in self.crashed and not isinstance(ev.msg, SendFailed):
                    lat = self.network.latency(
                        self.nodes[ev.dst].locality, self.nodes[ev.src].locality)
                    self._push(self.clock + lat, _Deliver(
                        ev.dst, ev.src, SendFailed(
                            original=ev.msg, dead=ev.dst, request_id=rid,
                            hop=getattr(ev.msg, "hop", 0))))
                return
            self.deliver_count += 1
            if rid is not None:
                self.steps.on_message(rid)
            self._trace(seq, ev.dst, "deliver", f"{name}:{rid or ''}:{ev.src.value}")
            self.nodes[ev.dst].on_message(self, ev.msg, ev.src)
        elif isinstance(ev, _Timer):
            if ev.node in self.crashed:
                return
            self._trace(seq, ev.node, "timer", ev.tag)
            self.nodes[ev.node].on_timer(self, ev.tag, ev.payload)
        elif isinstance(ev, _Crash):
            if ev.node in self.crashed:
                return
            self.crashed.add(ev.node)
            self._trace(seq, ev.node, "crash", "")
            self.nodes[ev.node].on_crash(self)
        elif isinstance(ev, _Rejoin):
            if ev.node not in self.crashed:
                raise NotCrashed(ev.node)
            self.crashed.discard(ev.node)
            self._trace(seq, ev.node, "rejoin", "")
            self.nodes[ev.node].on_rejoin(self)
        else:  # pragma: no cover
            raise SimError(f"unknown event {ev}")

    def trace_lines(self) -> list[str]:
        return [r.line() for r in self.trace]
