"""Node state machines: Agent (replica holder), RAgent (super-peer with
the meta-data catalogue), LUS (lookup service) and Client. Each node is
a single-threaded event handler driven by the simulator; all interaction
is via messages and timers.

Conventions used throughout:
 - every iteration over a set is sorted, so runs are reproducible
   regardless of the interpreter's hash seed;
 - messages carry ``request_id`` (for per-request accounting) and
   ``hop`` (path length from the originating client);
 - catalogues and load tables are copied when sent, never shared.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from .catalogue import AgentLoadTable, DuplicateObject, MetaCatalogue
from .core import (DistObject, LocalityDescriptor, NodeId, ObjectId,
                   PatternKey, Role)
from .dataops import (DEFAULT_MIGRATION_THRESHOLD, REPLICATION_FACTOR,
                      HotCounter, InsufficientAgents, LockTable,
                      PendingUpdate, merge_results, select_replica_holders)
from .lus import LusRegistry
from .membership import (HeartbeatConfig, NoMergeTarget, Thresholds,
                         choose_merge_target, detect_failures, elect_agent,
                         join_select_ragent, split_partition)
from .sim import SendFailed, Simulator

COPY_RETRY_LIMIT = 5
FETCH_RETRY_LIMIT = 5


@dataclass(frozen=True)
class ClusterConfig:
    """Knobs shared by every peer: thresholds, heartbeat cadence, the
    lookup-service addresses and the data-placement tunables. Carried
    across promotions, splits and demotions."""

    thresholds: Thresholds
    hb: HeartbeatConfig
    lus_ids: tuple = ()
    delegation_factor: float = 0.0  # 0 disables insert delegation
    migration_threshold: int = DEFAULT_MIGRATION_THRESHOLD


# ---------------------------------------------------------------------
# Messages


@dataclass(kw_only=True)
class LusQuery:
    requester: NodeId
    role: Role
    hop: int = 0


@dataclass(kw_only=True)
class LusQueryReply:
    entries: tuple = ()
    denied: bool = False
    hop: int = 0


@dataclass(kw_only=True)
class LusRegister:
    ragent: NodeId
    locality: LocalityDescriptor
    count: int


@dataclass(kw_only=True)
class LusDeregister:
    ragent: NodeId


@dataclass(kw_only=True)
class LusSync:
    action: str  # register | deregister
    ragent: NodeId
    locality: LocalityDescriptor | None = None
    count: int = 0


@dataclass(kw_only=True)
class JoinRequest:
    joiner: NodeId
    locality: LocalityDescriptor
    hop: int = 0


@dataclass(kw_only=True)
class JoinAccept:
    ragent: NodeId
    secondary: NodeId | None
    hop: int = 0


@dataclass(kw_only=True)
class JoinRedirect:
    hop: int = 0


@dataclass(kw_only=True)
class AgentHeartbeat:
    pass


@dataclass(kw_only=True)
class RAgentHeartbeat:
    secondary: NodeId | None


@dataclass(kw_only=True)
class PeerHeartbeat:
    cat_size: int
    member_count: int


@dataclass(kw_only=True)
class RAgentDown:
    ragent: NodeId


@dataclass(kw_only=True)
class ConfigUpdate:
    ragent: NodeId
    secondary: NodeId | None


@dataclass(kw_only=True)
class ReassignCluster:
    ragent: NodeId


@dataclass(kw_only=True)
class AssumeRAgent:
    catalogue: MetaCatalogue
    loads: dict
    members: tuple
    peers: tuple
    config: ClusterConfig


@dataclass(kw_only=True)
class CatalogueSync:
    catalogue: MetaCatalogue
    loads: dict
    members: tuple
    peers: tuple


@dataclass(kw_only=True)
class PeerUpdate:
    add: tuple = ()
    remove: tuple = ()


@dataclass(kw_only=True)
class MergeRequest:
    from_ragent: NodeId
    catalogue: MetaCatalogue
    loads: dict
    members: tuple


@dataclass(kw_only=True)
class MergeAck:
    target: NodeId


@dataclass(kw_only=True)
class CopyReplica:
    oid: ObjectId
    dest: NodeId
    copy_id: str | None = None  # set when the catalogue entry waits for CopyDone


@dataclass(kw_only=True)
class CopyFailed:
    oid: ObjectId
    dest: NodeId
    copy_id: str | None = None


@dataclass(kw_only=True)
class CopyDone:
    oid: ObjectId
    copy_id: str


@dataclass(kw_only=True)
class DropReplica:
    ids: tuple


@dataclass(kw_only=True)
class StoreReplica:
    obj: DistObject
    request_id: str | None = None
    copy_id: str | None = None
    hop: int = 0


# client -> agent


@dataclass(kw_only=True)
class CSearch:
    request_id: str
    criterion: PatternKey
    mode: str  # all | first
    hop: int = 1


@dataclass(kw_only=True)
class CInsert:
    request_id: str
    obj: DistObject
    hop: int = 1


@dataclass(kw_only=True)
class CUpdate:
    request_id: str
    oid: ObjectId
    payload: bytes
    hop: int = 1


@dataclass(kw_only=True)
class CRead:
    request_id: str
    oid: ObjectId
    hop: int = 1


@dataclass(kw_only=True)
class ReadReply:
    request_id: str
    obj: DistObject | None
    outcome: str
    hop: int = 0


# agent -> ragent (origin agent and client carried explicitly so the
# message survives being forwarded after a merge demotion)


@dataclass(kw_only=True)
class AgentSearch:
    request_id: str
    criterion: PatternKey
    mode: str
    agent: NodeId
    client: NodeId
    hop: int = 0


@dataclass(kw_only=True)
class AgentInsert:
    request_id: str
    obj: DistObject
    agent: NodeId
    client: NodeId
    hop: int = 0


@dataclass(kw_only=True)
class AgentUpdate:
    request_id: str
    oid: ObjectId
    payload: bytes
    agent: NodeId
    client: NodeId
    hop: int = 0


# super-peer to super-peer / to member agents


@dataclass(kw_only=True)
class RemoteSearch:
    request_id: str
    criterion: PatternKey
    mode: str
    hop: int = 0


@dataclass(kw_only=True)
class RemoteSearchReply:
    request_id: str
    objects: tuple = ()
    holder: NodeId | None = None
    hop: int = 0


@dataclass(kw_only=True)
class FetchObjects:
    request_id: str
    ids: tuple
    purpose: str = "search"  # search | migrate
    hop: int = 0


@dataclass(kw_only=True)
class FetchReply:
    request_id: str
    objects: tuple
    missing: tuple
    store_size: int
    purpose: str
    hop: int = 0


@dataclass(kw_only=True)
class DelegateInsert:
    request_id: str
    obj: DistObject
    origin_ragent: NodeId
    agent: NodeId
    client: NodeId
    hop: int = 0


@dataclass(kw_only=True)
class OwnerQuery:
    request_id: str
    oid: ObjectId
    purpose: str = "update"  # update | migrate
    hop: int = 0


@dataclass(kw_only=True)
class OwnerQueryReply:
    request_id: str
    oid: ObjectId
    has: bool
    purpose: str
    hop: int = 0


@dataclass(kw_only=True)
class ForwardUpdate:
    request_id: str
    oid: ObjectId
    payload: bytes
    origin_ragent: NodeId
    agent: NodeId
    client: NodeId
    hop: int = 0


@dataclass(kw_only=True)
class UpdateRetry:
    request_id: str
    oid: ObjectId
    payload: bytes
    agent: NodeId
    client: NodeId
    hop: int = 0


@dataclass(kw_only=True)
class ApplyUpdate:
    request_id: str
    oid: ObjectId
    payload: bytes
    hop: int = 0


@dataclass(kw_only=True)
class ApplyAck:
    request_id: str
    oid: ObjectId
    version: int
    hop: int = 0


@dataclass(kw_only=True)
class ApplyMissing:
    request_id: str
    oid: ObjectId
    hop: int = 0


@dataclass(kw_only=True)
class ReplicaUpdate:
    request_id: str
    oid: ObjectId
    payload: bytes
    version: int
    hop: int = 0


@dataclass(kw_only=True)
class ReplicaUpdateAck:
    request_id: str
    oid: ObjectId
    hop: int = 0


@dataclass(kw_only=True)
class ProgressNote:
    request_id: str
    oid: ObjectId
    route: tuple
    hop: int = 0


@dataclass(kw_only=True)
class OpReply:
    request_id: str
    op: str
    outcome: str
    route: tuple
    objects: tuple = ()
    holder: NodeId | None = None
    version: int | None = None
    hop: int = 0


@dataclass(kw_only=True)
class MigrateRequest:
    request_id: str
    oid: ObjectId
    hop: int = 0


@dataclass(kw_only=True)
class MigrateDenied:
    request_id: str
    oid: ObjectId
    hop: int = 0


@dataclass(kw_only=True)
class MigrateTransfer:
    request_id: str
    obj: DistObject
    hop: int = 0


@dataclass(kw_only=True)
class MigrateAck:
    request_id: str
    oid: ObjectId
    hop: int = 0


# ---------------------------------------------------------------------
# Base node


class BaseNode:
    def __init__(self, node_id: NodeId, locality: LocalityDescriptor):
        self.node_id = node_id
        self.locality = locality
        self.epoch = 0

    @property
    def role(self) -> Role:
        return self.node_id.role

    def on_message(self, sim: Simulator, msg, src: NodeId) -> None:
        handler = getattr(self, f"_on_{type(msg).__name__}", None)
        if handler is None:
            raise RuntimeError(
                f"{self.node_id} ({type(self).__name__}) cannot handle "
                f"{type(msg).__name__}")
        handler(sim, msg, src)

    def on_timer(self, sim: Simulator, tag: str, payload) -> None:
        handler = getattr(self, f"_tick_{tag}", None)
        if handler is not None:
            handler(sim, payload)

    def on_crash(self, sim: Simulator) -> None:
        pass

    def on_rejoin(self, sim: Simulator) -> None:
        pass

    # routed replies pass through intermediate nodes transparently
    def _on_OpReply(self, sim, msg: OpReply, src):
        if msg.route:
            sim.send(self.node_id, msg.route[0],
                     replace(msg, route=msg.route[1:], hop=msg.hop + 1))
        else:
            self._complete_op(sim, msg)

    def _on_ProgressNote(self, sim, msg: ProgressNote, src):
        if msg.route:
            sim.send(self.node_id, msg.route[0],
                     replace(msg, route=msg.route[1:], hop=msg.hop + 1))
        else:
            self._note_progress(sim, msg)

    def _complete_op(self, sim, msg: OpReply) -> None:
        pass

    def _note_progress(self, sim, msg: ProgressNote) -> None:
        pass


# ---------------------------------------------------------------------
# Lookup service


class LusNode(BaseNode):
    """One replicated lookup-service instance. Mutations are pushed
    eagerly to the sibling instances; instances never crash."""

    def __init__(self, node_id, locality, siblings=()):
        super().__init__(node_id, locality)
        self.registry = LusRegistry()
        self.siblings: tuple[NodeId, ...] = tuple(siblings)

    def _on_LusRegister(self, sim, msg: LusRegister, src):
        self.registry.register(msg.ragent, msg.locality, msg.count, sim.clock)
        for sib in self.siblings:
            sim.send(self.node_id, sib, LusSync(
                action="register", ragent=msg.ragent,
                locality=msg.locality, count=msg.count))

    def _on_LusDeregister(self, sim, msg: LusDeregister, src):
        self.registry.deregister(msg.ragent)
        for sib in self.siblings:
            sim.send(self.node_id, sib, LusSync(action="deregister", ragent=msg.ragent))

    def _on_LusSync(self, sim, msg: LusSync, src):
        if msg.action == "register":
            self.registry.register(msg.ragent, msg.locality, msg.count, sim.clock)
        else:
            self.registry.deregister(msg.ragent)

    def _on_LusQuery(self, sim, msg: LusQuery, src):
        if msg.role is Role.CLIENT:
            sim.send(self.node_id, src, LusQueryReply(denied=True, hop=msg.hop + 1))
            return
        entries = tuple(self.registry.query(msg.role))
        sim.send(self.node_id, src, LusQueryReply(entries=entries, hop=msg.hop + 1))

    def _on_SendFailed(self, sim, msg, src):
        pass  # a dead addressee needs no follow-up from the registry


# ---------------------------------------------------------------------
# Agent


class AgentNode(BaseNode):
    """Ordinary peer: holds object replicas, heartbeats its super-peer,
    relays client operations, and (when designated secondary backup)
    keeps a live copy of the cluster catalogue, promoting itself if the
    super-peer dies."""

    def __init__(self, node_id, locality, config: ClusterConfig):
        super().__init__(node_id, locality)
        self.config = config
        self.store: dict[ObjectId, DistObject] = {}
        self.history: dict[ObjectId, list[int]] = {}
        self.ragent: NodeId | None = None
        self.secondary_id: NodeId | None = None
        self.last_ragent_seen = 0
        self.joined = False
        # secondary-backup shadow state, populated by CatalogueSync
        self.sync_catalogue: MetaCatalogue | None = None
        self.sync_loads: dict | None = None
        self.sync_members: tuple = ()
        self.sync_peers: tuple = ()
        self._suspected_ragent: NodeId | None = None

    @property
    def hb(self) -> HeartbeatConfig:
        return self.config.hb

    # -- lifecycle ------------------------------------------------------

    def start(self, sim: Simulator) -> None:
        if self.joined:
            self.last_ragent_seen = sim.clock
            sim.set_timer(self.node_id, "hb", self.hb.period_us, self.epoch)
        else:
            self._begin_join(sim)

    def _begin_join(self, sim: Simulator) -> None:
        if not self.config.lus_ids:
            return
        sim.send(self.node_id, self.config.lus_ids[0],
                 LusQuery(requester=self.node_id, role=Role.AGENT))

    def _on_LusQueryReply(self, sim, msg: LusQueryReply, src):
        if self.joined:
            return
        if msg.denied or not msg.entries:
            sim.set_timer(self.node_id, "retry_join", self.hb.period_us, self.epoch)
            return
        choice = join_select_ragent(list(msg.entries), self.locality)
        sim.send(self.node_id, choice,
                 JoinRequest(joiner=self.node_id, locality=self.locality))

    def _tick_retry_join(self, sim, payload):
        if payload == self.epoch and not self.joined:
            self._begin_join(sim)

    def _on_JoinAccept(self, sim, msg: JoinAccept, src):
        if self.joined:
            return
        self.joined = True
        self.ragent = msg.ragent
        self.secondary_id = msg.secondary
        self.last_ragent_seen = sim.clock
        self._suspected_ragent = None
        sim.set_timer(self.node_id, "hb", self.hb.period_us, self.epoch)

    def _on_JoinRedirect(self, sim, msg, src):
        if not self.joined:
            sim.set_timer(self.node_id, "retry_join", self.hb.period_us, self.epoch)

    def on_rejoin(self, sim):
        # stale replicas are discarded; the node re-enters as a fresh agent
        self.epoch += 1
        self.store.clear()
        self.history.clear()
        self.joined = False
        self.ragent = None
        self.secondary_id = None
        self.sync_catalogue = None
        self.sync_loads = None
        self._suspected_ragent = None
        self._begin_join(sim)

    # -- heartbeats and failover ------------------------------------------

    def _tick_hb(self, sim, payload):
        if payload != self.epoch:
            return
        if self.joined and self.ragent is not None:
            sim.send(self.node_id, self.ragent, AgentHeartbeat())
            silent = sim.clock - self.last_ragent_seen
            if silent > self.hb.failure_timeout_us and self._suspected_ragent != self.ragent:
                self._suspect_ragent(sim)
        sim.set_timer(self.node_id, "hb", self.hb.period_us, self.epoch)

    def _suspect_ragent(self, sim):
        self._suspected_ragent = self.ragent
        if self.secondary_id == self.node_id:
            self._promote(sim)
            return
        if self.secondary_id is not None:
            sim.send(self.node_id, self.secondary_id, RAgentDown(ragent=self.ragent))
            sim.set_timer(self.node_id, "lost_check",
                          self.hb.failure_timeout_us, (self.epoch, self.ragent))
        else:
            sim.record_cluster_lost(self.ragent, self.node_id)

    def _tick_lost_check(self, sim, payload):
        epoch, suspected = payload
        if epoch != self.epoch:
            return
        # still pointing at the dead super-peer and nobody announced a
        # replacement: the cluster state is gone
        if self.ragent == suspected and sim.clock - self.last_ragent_seen > self.hb.failure_timeout_us:
            sim.record_cluster_lost(suspected, self.node_id)

    def _on_RAgentHeartbeat(self, sim, msg: RAgentHeartbeat, src):
        self.ragent = src
        self.secondary_id = msg.secondary
        self.last_ragent_seen = sim.clock
        self._suspected_ragent = None
        self.joined = True

    def _on_ConfigUpdate(self, sim, msg: ConfigUpdate, src):
        self.ragent = msg.ragent
        self.secondary_id = msg.secondary
        self.last_ragent_seen = sim.clock
        self._suspected_ragent = None

    def _on_ReassignCluster(self, sim, msg: ReassignCluster, src):
        self.ragent = msg.ragent
        self.last_ragent_seen = sim.clock
        self._suspected_ragent = None

    def _on_CatalogueSync(self, sim, msg: CatalogueSync, src):
        self.sync_catalogue = msg.catalogue
        self.sync_loads = msg.loads
        self.sync_members = msg.members
        self.sync_peers = msg.peers

    def _on_RAgentDown(self, sim, msg: RAgentDown, src):
        if msg.ragent != self.ragent:
            return
        if self.secondary_id == self.node_id and self.sync_catalogue is not None:
            if sim.clock - self.last_ragent_seen > self.hb.failure_timeout_us:
                self._promote(sim)

    def _promote(self, sim):
        """Secondary backup takes over the crashed super-peer's role,
        using the synced catalogue copy."""
        old = self.ragent
        sim.record_member_event("promote", self.node_id, self.node_id,
                                f"replacing={old.value if old else '-'}")
        ragent = RAgentNode(NodeId(self.node_id.value, Role.RAGENT),
                            self.locality, self.config)
        ragent.catalogue = self.sync_catalogue or MetaCatalogue()
        members = set(self.sync_members) - {self.node_id}
        if old is not None:
            members.discard(old)
        ragent.members = members
        loads = AgentLoadTable()
        for a in sorted(members):
            loads.counts[a] = (self.sync_loads or {}).get(a, 0)
        ragent.loads = loads
        ragent.peers = set(self.sync_peers) - ({old} if old else set()) - {self.node_id}
        ragent.member_last_seen = {a: sim.clock for a in sorted(members)}
        ragent.peer_last_seen = {p: sim.clock for p in sorted(ragent.peers)}
        ragent.epoch = self.epoch + 1
        sim.nodes[self.node_id] = ragent
        ragent.take_over(sim, old_ragent=old)

    # -- replica store -----------------------------------------------------

    def _record_version(self, oid: ObjectId, version: int) -> None:
        self.history.setdefault(oid, []).append(version)

    def _on_StoreReplica(self, sim, msg: StoreReplica, src):
        self.store[msg.obj.id] = msg.obj
        self._record_version(msg.obj.id, msg.obj.version)
        if msg.copy_id is not None and self.ragent is not None:
            # the super-peer only lists this node as holder once the
            # bytes have actually arrived
            sim.send(self.node_id, self.ragent,
                     CopyDone(oid=msg.obj.id, copy_id=msg.copy_id))

    def _on_DropReplica(self, sim, msg: DropReplica, src):
        for oid in msg.ids:
            self.store.pop(oid, None)

    def _on_CopyReplica(self, sim, msg: CopyReplica, src):
        obj = self.store.get(msg.oid)
        if obj is None:
            sim.send(self.node_id, src, CopyFailed(
                oid=msg.oid, dest=msg.dest, copy_id=msg.copy_id))
        else:
            sim.send(self.node_id, msg.dest,
                     StoreReplica(obj=obj, copy_id=msg.copy_id))

    def _on_FetchObjects(self, sim, msg: FetchObjects, src):
        objects, missing = [], []
        for oid in msg.ids:
            if oid in self.store:
                objects.append(self.store[oid])
            else:
                missing.append(oid)
        sim.send(self.node_id, src, FetchReply(
            request_id=msg.request_id, objects=tuple(objects),
            missing=tuple(missing), store_size=len(self.store),
            purpose=msg.purpose, hop=msg.hop + 1))

    def _on_ApplyUpdate(self, sim, msg: ApplyUpdate, src):
        obj = self.store.get(msg.oid)
        if obj is None:
            # replica copy still in flight; the super-peer retries
            sim.send(self.node_id, src, ApplyMissing(
                request_id=msg.request_id, oid=msg.oid, hop=msg.hop + 1))
            return
        new = obj.with_payload(msg.payload, obj.version + 1)
        self.store[msg.oid] = new
        self._record_version(msg.oid, new.version)
        sim.send(self.node_id, src, ApplyAck(
            request_id=msg.request_id, oid=msg.oid, version=new.version,
            hop=msg.hop + 1))

    def _on_ReplicaUpdate(self, sim, msg: ReplicaUpdate, src):
        current = self.store.get(msg.oid)
        # versions are monotone; a copy that raced ahead is kept
        if current is not None and msg.version > current.version:
            self.store[msg.oid] = current.with_payload(msg.payload, msg.version)
            self._record_version(msg.oid, msg.version)
        sim.send(self.node_id, src, ReplicaUpdateAck(
            request_id=msg.request_id, oid=msg.oid, hop=msg.hop + 1))

    def _on_CRead(self, sim, msg: CRead, src):
        obj = self.store.get(msg.oid)
        outcome = "ok" if obj is not None else "not_held"
        sim.send(self.node_id, src, ReadReply(
            request_id=msg.request_id, obj=obj, outcome=outcome, hop=msg.hop + 1))

    # -- client relays -------------------------------------------------------

    def _relay_fail(self, sim, request_id, op, client):
        sim.send(self.node_id, client, OpReply(
            request_id=request_id, op=op, outcome="no_ragent", route=()))

    def _on_CSearch(self, sim, msg: CSearch, src):
        if not self.joined or self.ragent is None:
            self._relay_fail(sim, msg.request_id,
                             "search" if msg.mode == "all" else "search_first", src)
            return
        sim.send(self.node_id, self.ragent, AgentSearch(
            request_id=msg.request_id, criterion=msg.criterion, mode=msg.mode,
            agent=self.node_id, client=src, hop=msg.hop + 1))

    def _on_CInsert(self, sim, msg: CInsert, src):
        if not self.joined or self.ragent is None:
            self._relay_fail(sim, msg.request_id, "insert", src)
            return
        sim.send(self.node_id, self.ragent, AgentInsert(
            request_id=msg.request_id, obj=msg.obj,
            agent=self.node_id, client=src, hop=msg.hop + 1))

    def _on_CUpdate(self, sim, msg: CUpdate, src):
        if not self.joined or self.ragent is None:
            self._relay_fail(sim, msg.request_id, "update", src)
            return
        sim.send(self.node_id, self.ragent, AgentUpdate(
            request_id=msg.request_id, oid=msg.oid, payload=msg.payload,
            agent=self.node_id, client=src, hop=msg.hop + 1))

    # a demoted or stale node may still receive super-peer traffic briefly
    def _on_RemoteSearch(self, sim, msg: RemoteSearch, src):
        sim.send(self.node_id, src, RemoteSearchReply(
            request_id=msg.request_id, objects=(), hop=msg.hop + 1))

    def _on_OwnerQuery(self, sim, msg: OwnerQuery, src):
        sim.send(self.node_id, src, OwnerQueryReply(
            request_id=msg.request_id, oid=msg.oid, has=False,
            purpose=msg.purpose, hop=msg.hop + 1))

    def _on_MigrateRequest(self, sim, msg: MigrateRequest, src):
        sim.send(self.node_id, src, MigrateDenied(
            request_id=msg.request_id, oid=msg.oid, hop=msg.hop + 1))

    def _on_AgentHeartbeat(self, sim, msg, src):
        pass

    def _on_PeerHeartbeat(self, sim, msg, src):
        pass

    def _on_PeerUpdate(self, sim, msg, src):
        pass

    def _on_RemoteSearchReply(self, sim, msg, src):
        pass

    def _on_OwnerQueryReply(self, sim, msg, src):
        pass

    def _on_CopyDone(self, sim, msg, src):
        pass  # a copy acked to a node demoted since it asked for it

    def _on_AssumeRAgent(self, sim, msg: AssumeRAgent, src):
        assume_ragent(sim, self, msg)

    def _on_SendFailed(self, sim, msg: SendFailed, src):
        orig = msg.original
        if isinstance(orig, JoinRequest):
            sim.set_timer(self.node_id, "retry_join", self.hb.period_us, self.epoch)
        elif isinstance(orig, RAgentDown):
            # the secondary is dead too: the cluster state is unrecoverable
            sim.record_cluster_lost(orig.ragent, self.node_id)
        elif isinstance(orig, (AgentSearch, AgentInsert, AgentUpdate)):
            op = {"AgentSearch": "search", "AgentInsert": "insert",
                  "AgentUpdate": "update"}[type(orig).__name__]
            if isinstance(orig, AgentSearch) and orig.mode == "first":
                op = "search_first"
            sim.send(self.node_id, orig.client, OpReply(
                request_id=orig.request_id, op=op, outcome="ragent_down",
                route=(), hop=orig.hop + 1))
        # bounced heartbeats need no reaction; detection is timeout-driven


# ---------------------------------------------------------------------
# RAgent


@dataclass
class SearchState:
    mode: str
    criterion: PatternKey
    route: tuple = ()                    # local origin: reply path
    remote_origin: NodeId | None = None  # remote origin: peer to answer
    awaiting_agents: dict = field(default_factory=dict)
    awaiting_peers: set = field(default_factory=set)
    results: list = field(default_factory=list)
    holder: NodeId | None = None
    max_hop: int = 0
    retries: int = 0


@dataclass
class ResolveState:
    oid: ObjectId
    payload: bytes
    agent: NodeId
    client: NodeId
    awaiting: set
    forwarded: bool = False
    hop: int = 0


@dataclass
class UpdateExec:
    pu: PendingUpdate
    oid: ObjectId
    awaiting_acks: set = field(default_factory=set)
    version: int | None = None


class RAgentNode(BaseNode):
    """Super-peer: heads a cluster of agents, owns the meta-data
    catalogue, runs the data protocols and the failure handlers, and
    keeps its secondary backup in sync."""

    def __init__(self, node_id, locality, config: ClusterConfig):
        super().__init__(node_id, locality)
        self.config = config
        self.catalogue = MetaCatalogue()
        self.members: set[NodeId] = set()
        self.loads = AgentLoadTable()
        self.secondary: NodeId | None = None
        self.peers: set[NodeId] = set()
        self.peer_sizes: dict[NodeId, int] = {}
        self.peer_members: dict[NodeId, int] = {}
        self.peer_last_seen: dict[NodeId, int] = {}
        self.member_last_seen: dict[NodeId, int] = {}
        self.locks = LockTable()
        self.hot = HotCounter(migration_threshold=config.migration_threshold)
        self.searches: dict[str, SearchState] = {}
        self.resolutions: dict[str, ResolveState] = {}
        self.updates: dict[str, UpdateExec] = {}
        self.out_migrations: dict[str, tuple] = {}   # rid -> (oid, requester)
        self.in_migrations: dict[str, dict] = {}
        self._migseq = 0
        # in-flight re-replications: copy_id -> (oid, dest, source); the
        # dest only becomes a catalogue holder on CopyDone
        self.pending_copies: dict[str, tuple] = {}
        self._copyseq = 0
        self._copy_attempts: dict[tuple, int] = {}
        self.reconfiguring = False
        self.merge_target: NodeId | None = None
        self.deferred: list = []

    @property
    def hb(self) -> HeartbeatConfig:
        return self.config.hb

    @property
    def thresholds(self) -> Thresholds:
        return self.config.thresholds

    @property
    def cluster_tag(self) -> str:
        return self.node_id.value

    # -- lifecycle -----------------------------------------------------------

    def start(self, sim: Simulator) -> None:
        now = sim.clock
        for a in sorted(self.members):
            self.member_last_seen.setdefault(a, now)
        for p in sorted(self.peers):
            self.peer_last_seen.setdefault(p, now)
        sim.set_timer(self.node_id, "sweep", self.hb.period_us, self.epoch)

    def take_over(self, sim: Simulator, old_ragent: NodeId | None) -> None:
        """Finish a secondary-backup promotion: vacate own replicas,
        replace the registry entry, reconnect the peer graph, and install
        a fresh secondary."""
        self._vacate_holder(sim, self.node_id)
        if self.config.lus_ids:
            home = self.config.lus_ids[0]
            if old_ragent is not None:
                sim.send(self.node_id, home, LusDeregister(ragent=old_ragent))
            sim.send(self.node_id, home, LusRegister(
                ragent=self.node_id, locality=self.locality,
                count=len(self.members)))
        for p in sorted(self.peers):
            sim.send(self.node_id, p, PeerUpdate(
                add=(self.node_id,),
                remove=(old_ragent,) if old_ragent else ()))
        self._elect_secondary(sim)
        for m in sorted(self.members):
            sim.send(self.node_id, m, ConfigUpdate(
                ragent=self.node_id, secondary=self.secondary))
        self.start(sim)

    def on_rejoin(self, sim):
        # a crashed super-peer re-enters the system as a fresh agent
        agent = AgentNode(NodeId(self.node_id.value, Role.AGENT),
                          self.locality, self.config)
        agent.epoch = self.epoch + 1
        sim.nodes[self.node_id] = agent
        agent.on_rejoin(sim)

    # -- secondary sync --------------------------------------------------

    def _sync_secondary(self, sim):
        if self.secondary is None:
            return
        sim.send(self.node_id, self.secondary, CatalogueSync(
            catalogue=self.catalogue.copy(),
            loads=dict(self.loads.counts),
            members=tuple(sorted(self.members)),
            peers=tuple(sorted(self.peers | {self.node_id}))))

    def _elect_secondary(self, sim):
        if self.members:
            self.secondary = elect_agent(self.members)
            sim.record_member_event("secondary_elected", self.node_id, self.secondary)
            self._sync_secondary(sim)
        else:
            self.secondary = None

    def _update_lus_count(self, sim):
        if self.config.lus_ids:
            sim.send(self.node_id, self.config.lus_ids[0], LusRegister(
                ragent=self.node_id, locality=self.locality,
                count=len(self.members)))

    # -- sweep: heartbeats, detection, threshold checks --------------------

    def _tick_sweep(self, sim, payload):
        if payload != self.epoch:
            return
        for m in sorted(self.members):
            sim.send(self.node_id, m, RAgentHeartbeat(secondary=self.secondary))
        for p in sorted(self.peers):
            sim.send(self.node_id, p, PeerHeartbeat(
                cat_size=len(self.catalogue), member_count=len(self.members)))
        for dead in detect_failures(sim.clock, self.member_last_seen,
                                    self.hb.failure_timeout_us):
            self._handle_agent_failure(sim, dead, "heartbeat")
        for dead in detect_failures(sim.clock, self.peer_last_seen,
                                    self.hb.failure_timeout_us):
            self._drop_peer(sim, dead)
        self._check_thresholds(sim)
        # safety net: re-replicate anything that lost a copy attempt to a
        # race the reactive handlers did not see
        if not self.reconfiguring and len(self.members) >= REPLICATION_FACTOR:
            for oid in sorted(self.catalogue.object_ids()):
                holders = self.catalogue.holders_of(oid)
                if len(holders) < REPLICATION_FACTOR:
                    self._restore_redundancy(sim, oid, holders)
        sim.set_timer(self.node_id, "sweep", self.hb.period_us, self.epoch)

    def _check_thresholds(self, sim):
        if self.reconfiguring:
            return
        if len(self.members) > self.thresholds.max_cluster:
            self._split(sim)
        elif len(self.members) < self.thresholds.min_cluster and self.peers:
            self._initiate_merge(sim)

    def _tick_reconfig_check(self, sim, payload):
        if payload == self.epoch:
            self._check_thresholds(sim)

    def _on_AgentHeartbeat(self, sim, msg, src):
        if src in self.members:
            self.member_last_seen[src] = sim.clock

    def _on_PeerHeartbeat(self, sim, msg: PeerHeartbeat, src):
        if src == self.node_id:
            return
        self.peers.add(src)
        self.peer_last_seen[src] = sim.clock
        self.peer_sizes[src] = msg.cat_size
        self.peer_members[src] = msg.member_count

    def _on_PeerUpdate(self, sim, msg: PeerUpdate, src):
        for p in msg.remove:
            self._drop_peer(sim, p)
        for p in msg.add:
            if p != self.node_id:
                self.peers.add(p)
                self.peer_last_seen[p] = sim.clock

    def _drop_peer(self, sim, peer: NodeId):
        if peer not in self.peers and peer not in self.peer_last_seen:
            return
        self.peers.discard(peer)
        self.peer_last_seen.pop(peer, None)
        self.peer_sizes.pop(peer, None)
        self.peer_members.pop(peer, None)
        # a confirmed-dead peer may have taken its whole cluster with it;
        # no survivor will replace its registry entry, so clear it here
        if peer in sim.crashed and self.config.lus_ids:
            sim.send(self.node_id, self.config.lus_ids[0],
                     LusDeregister(ragent=peer))
        # requests waiting on that peer must not stall
        for rid in sorted(self.searches):
            st = self.searches[rid]
            if peer in st.awaiting_peers:
                st.awaiting_peers.discard(peer)
                self._maybe_finish_search(sim, rid)
        for rid in sorted(self.resolutions):
            rs = self.resolutions[rid]
            if peer in rs.awaiting:
                rs.awaiting.discard(peer)
                self._maybe_finish_resolution(sim, rid)

    # -- join / membership ----------------------------------------------

    def _on_JoinRequest(self, sim, msg: JoinRequest, src):
        if self.reconfiguring:
            self.deferred.append(msg)
            return
        joiner = msg.joiner
        if joiner in self.members:
            # transient crash+rejoin before detection: clear the stale
            # membership first, then admit as a fresh agent
            self._handle_agent_failure(sim, joiner, "transient-rejoin")
        self.members.add(joiner)
        self.loads.add_agent(joiner)
        self.member_last_seen[joiner] = sim.clock
        if self.secondary is None:
            self.secondary = joiner
        sim.send(self.node_id, joiner, JoinAccept(
            ragent=self.node_id, secondary=self.secondary, hop=msg.hop + 1))
        sim.record_member_event("admit", self.node_id, joiner)
        self._update_lus_count(sim)
        self._sync_secondary(sim)
        if len(self.members) > self.thresholds.max_cluster:
            sim.set_timer(self.node_id, "reconfig_check", 0, self.epoch)

    def _vacate_holder(self, sim, node: NodeId):
        """Remove ``node`` from every holder list, promoting survivors to
        owners and re-replicating from them onto the least-loaded members."""
        orphans = self.catalogue.remove_agent(node)
        self.loads.drop_agent(node)
        for oid, survivors in sorted(orphans):
            if not survivors:
                sim.record_loss(oid, "all-holders-gone")
                continue
            self._restore_redundancy(sim, oid, survivors)

    def _restore_redundancy(self, sim, oid: ObjectId, survivors):
        if len(survivors) >= REPLICATION_FACTOR:
            return
        if any(p[0] == oid for p in self.pending_copies.values()):
            return  # a copy for this object is already in flight
        try:
            extra = select_replica_holders(self.loads, k=1, exclude=survivors)
        except InsufficientAgents:
            return  # transiently under-replicated; too few agents left
        new_holder = extra[0]
        self._copyseq += 1
        copy_id = f"{self.node_id.value}.cp{self._copyseq}"
        self.pending_copies[copy_id] = (oid, new_holder, survivors[0])
        sim.send(self.node_id, survivors[0],
                 CopyReplica(oid=oid, dest=new_holder, copy_id=copy_id))

    def _on_CopyDone(self, sim, msg: CopyDone, src):
        entry = self.pending_copies.pop(msg.copy_id, None)
        if entry is None:
            return
        oid, dest, _source = entry
        if oid not in self.catalogue or dest not in self.members:
            # object migrated away or the new holder died meanwhile
            sim.send(self.node_id, src, DropReplica(ids=(oid,)))
            return
        if dest not in self.catalogue.holders_of(oid):
            self.catalogue.add_holder(oid, dest)
            self.loads.bump(dest)
        self._sync_secondary(sim)

    def _handle_agent_failure(self, sim, failed: NodeId, reason: str):
        if failed not in self.members:
            return  # idempotent under repeated reports
        self.members.discard(failed)
        self.member_last_seen.pop(failed, None)
        sim.record_member_event("agent_failed", self.node_id, failed, reason)
        # in-flight copies touching the dead node will never complete;
        # source failures re-orphan through the vacate below, dest
        # failures need an explicit fresh attempt
        retry_oids = []
        for cid in sorted(self.pending_copies):
            oid, dest, source = self.pending_copies[cid]
            if failed in (dest, source):
                del self.pending_copies[cid]
                if dest == failed:
                    retry_oids.append(oid)
        self._vacate_holder(sim, failed)
        for oid in retry_oids:
            if oid in self.catalogue:
                self._restore_redundancy(sim, oid, self.catalogue.holders_of(oid))
        if failed == self.secondary:
            self._elect_secondary(sim)
        else:
            self._sync_secondary(sim)
        self._update_lus_count(sim)
        if len(self.members) < self.thresholds.min_cluster:
            sim.set_timer(self.node_id, "reconfig_check", 0, self.epoch)

    # -- split -----------------------------------------------------------

    def _split(self, sim):
        if len(self.members) <= self.thresholds.max_cluster:
            return
        entries_before = len(self.catalogue)
        candidates = (self.members - {self.secondary}) or self.members
        new_r = elect_agent(candidates)
        # the elected agent becomes a super-peer; its replicas move to
        # the survivors first
        self.members.discard(new_r)
        self.member_last_seen.pop(new_r, None)
        self._vacate_holder(sim, new_r)
        keep_list, move_list = split_partition(self.members)
        keep_set, move_set = set(keep_list), set(move_list)
        keep_cat, move_cat = self.catalogue.split(keep_set, move_set)
        # replicas stranded on the other side are replaced while this
        # node still has the global load view
        self._rehome_across(sim, keep_cat, keep_set)
        self._rehome_across(sim, move_cat, move_set)
        move_loads = {a: self.loads.counts[a] for a in move_list}
        new_id = NodeId(new_r.value, Role.RAGENT)
        sim.send(self.node_id, new_r, AssumeRAgent(
            catalogue=move_cat, loads=move_loads, members=tuple(move_list),
            peers=tuple(sorted((self.peers | {self.node_id}) - {new_r})),
            config=self.config))
        for m in move_list:
            sim.send(self.node_id, m, ReassignCluster(ragent=new_id))
        # shrink self to the keep side
        self.catalogue = keep_cat
        self.members = keep_set
        # in-flight copies aimed at (or sourced from) departed members
        # will never be acked here; the redundancy sweep re-issues them
        for cid in sorted(self.pending_copies):
            _oid, dest, source = self.pending_copies[cid]
            if dest not in keep_set or source not in keep_set:
                del self.pending_copies[cid]
        keep_loads = AgentLoadTable(keep_list)
        for oid in sorted(keep_cat.object_ids()):
            for h in keep_cat.holders_of(oid):
                keep_loads.bump(h)
        self.loads = keep_loads
        self.member_last_seen = {a: sim.clock for a in keep_list}
        if self.secondary not in keep_set:
            self._elect_secondary(sim)
        else:
            self._sync_secondary(sim)
        for p in sorted(self.peers):
            sim.send(self.node_id, p, PeerUpdate(add=(new_id,)))
        self.peers.add(new_id)
        self.peer_last_seen[new_id] = sim.clock
        self.peer_sizes[new_id] = len(move_cat)
        self.peer_members[new_id] = len(move_list)
        self._update_lus_count(sim)
        sim.record_member_event(
            "split", self.node_id, new_id,
            f"entries={entries_before}->{len(keep_cat)}+{len(move_cat)} "
            f"keep={len(keep_set)} move={len(move_set)}")

    def _rehome_across(self, sim, cat: MetaCatalogue, member_set: set):
        for oid in sorted(cat.object_ids()):
            for stray in [a for a in cat.holders_of(oid) if a not in member_set]:
                cat.remove_holder(oid, stray)
                self.loads.bump(stray, -1)
                sim.send(self.node_id, stray, DropReplica(ids=(oid,)))
                current = cat.holders_of(oid)
                candidates = [(self.loads.counts[a], a)
                              for a in sorted(member_set) if a not in current]
                if candidates:
                    new_holder = min(candidates)[1]
                    cat.add_holder(oid, new_holder)
                    self.loads.bump(new_holder)
                    sim.send(self.node_id, cat.owner_of(oid),
                             CopyReplica(oid=oid, dest=new_holder))

    # -- merge ------------------------------------------------------------

    def _initiate_merge(self, sim):
        known = [(rid, self.peer_members[rid]) for rid in sorted(self.peers)
                 if rid in self.peer_members]
        if not known:
            return  # peer sizes unknown yet; retried next sweep
        try:
            target = choose_merge_target(known, self.node_id)
        except NoMergeTarget:
            return
        self.reconfiguring = True
        self.merge_target = target
        sim.send(self.node_id, target, MergeRequest(
            from_ragent=self.node_id,
            catalogue=self.catalogue.copy(),
            loads=dict(self.loads.counts),
            members=tuple(sorted(self.members))))

    def _on_MergeRequest(self, sim, msg: MergeRequest, src):
        if self.reconfiguring:
            self.deferred.append(msg)
            return
        entries_in = len(msg.catalogue)
        entries_own = len(self.catalogue)
        self.catalogue.merge(msg.catalogue)
        demoted = NodeId(msg.from_ragent.value, Role.AGENT)
        for a in list(msg.members) + [demoted]:
            if a not in self.members:
                self.members.add(a)
                self.loads.counts[a] = msg.loads.get(a, 0)
                self.member_last_seen[a] = sim.clock
        for a in msg.members:
            sim.send(self.node_id, a, ReassignCluster(ragent=self.node_id))
        sim.send(self.node_id, msg.from_ragent, MergeAck(target=self.node_id))
        self._drop_peer(sim, msg.from_ragent)
        self._update_lus_count(sim)
        self._sync_secondary(sim)
        sim.record_member_event(
            "merge", self.node_id, msg.from_ragent,
            f"entries={entries_own}+{entries_in}={len(self.catalogue)} "
            f"members={len(self.members)}")
        if len(self.members) > self.thresholds.max_cluster:
            sim.set_timer(self.node_id, "reconfig_check", 0, self.epoch)

    def _on_MergeAck(self, sim, msg: MergeAck, src):
        # demote: this node becomes a plain agent of the target cluster
        sim.record_member_event("demote", self.node_id, self.node_id,
                                f"merged_into={msg.target.value}")
        if self.config.lus_ids:
            sim.send(self.node_id, self.config.lus_ids[0],
                     LusDeregister(ragent=self.node_id))
        for p in sorted(self.peers):
            if p != msg.target:
                sim.send(self.node_id, p, PeerUpdate(remove=(self.node_id,)))
        agent = AgentNode(NodeId(self.node_id.value, Role.AGENT),
                          self.locality, self.config)
        agent.epoch = self.epoch + 1
        agent.joined = True
        agent.ragent = msg.target
        sim.nodes[self.node_id] = agent
        agent.start(sim)
        # anything deferred during the merge window belongs to the target
        for m in self.deferred:
            sim.send(self.node_id, msg.target, m)
        self.deferred.clear()

    # -- search ------------------------------------------------------------

    def _lookup_counted(self, sim, request_id: str, criterion: PatternKey):
        matches, key_steps = self.catalogue.lookup(criterion)
        sim.steps.on_lookup(request_id, self.cluster_tag,
                            self.catalogue.key_count, key_steps, len(matches))
        return matches

    def _fetch_groups(self, sim, request_id: str, matches, st: SearchState, hop: int):
        """Fetch matched objects from their owners, one batched request
        per distinct owner agent."""
        by_owner: dict[NodeId, list[ObjectId]] = {}
        for oid, owner in matches:
            by_owner.setdefault(owner, []).append(oid)
        for owner in sorted(by_owner):
            ids = tuple(sorted(by_owner[owner]))
            sim.steps.on_fetch_request(request_id, self.cluster_tag, owner, len(ids))
            st.awaiting_agents[owner] = st.awaiting_agents.get(owner, 0) + 1
            sim.send(self.node_id, owner, FetchObjects(
                request_id=request_id, ids=ids, hop=hop))

    def _on_AgentSearch(self, sim, msg: AgentSearch, src):
        st = SearchState(mode=msg.mode, criterion=msg.criterion,
                         route=(msg.agent, msg.client), max_hop=msg.hop)
        self.searches[msg.request_id] = st
        matches = self._lookup_counted(sim, msg.request_id, msg.criterion)
        if msg.mode == "first":
            if matches:
                oid, owner = matches[0]
                st.holder = owner
                sim.steps.on_fetch_request(msg.request_id, self.cluster_tag, owner, 1)
                st.awaiting_agents[owner] = 1
                sim.send(self.node_id, owner, FetchObjects(
                    request_id=msg.request_id, ids=(oid,), hop=msg.hop + 1))
            elif self.peers:
                st.awaiting_peers = set(self.peers)
                for p in sorted(self.peers):
                    sim.send(self.node_id, p, RemoteSearch(
                        request_id=msg.request_id, criterion=msg.criterion,
                        mode="first", hop=msg.hop + 1))
            else:
                self._finish_search(sim, msg.request_id)
            return
        # mode "all": fan out to peers and fetch locally in parallel
        st.awaiting_peers = set(self.peers)
        for p in sorted(self.peers):
            sim.send(self.node_id, p, RemoteSearch(
                request_id=msg.request_id, criterion=msg.criterion,
                mode="all", hop=msg.hop + 1))
        self._fetch_groups(sim, msg.request_id, matches, st, msg.hop + 1)
        self._maybe_finish_search(sim, msg.request_id)

    def _on_RemoteSearch(self, sim, msg: RemoteSearch, src):
        rid = msg.request_id
        st = SearchState(mode=msg.mode, criterion=msg.criterion,
                         remote_origin=src, max_hop=msg.hop)
        self.searches[rid] = st
        matches = self._lookup_counted(sim, rid, msg.criterion)
        if msg.mode == "first":
            if matches:
                oid, owner = matches[0]
                st.holder = owner
                sim.steps.on_fetch_request(rid, self.cluster_tag, owner, 1)
                st.awaiting_agents[owner] = 1
                sim.send(self.node_id, owner, FetchObjects(
                    request_id=rid, ids=(oid,), hop=msg.hop + 1))
            else:
                del self.searches[rid]
                sim.send(self.node_id, src, RemoteSearchReply(
                    request_id=rid, objects=(), hop=msg.hop + 1))
            return
        self._fetch_groups(sim, rid, matches, st, msg.hop + 1)
        self._maybe_finish_search(sim, rid)

    def _on_FetchReply(self, sim, msg: FetchReply, src):
        if msg.purpose == "migrate":
            self._migrate_fetched(sim, msg, src)
            return
        st = self.searches.get(msg.request_id)
        if st is None:
            return  # request already answered
        if msg.objects:
            sim.steps.on_probe(msg.request_id, self.cluster_tag,
                               msg.store_size, len(msg.objects))
        st.results.extend(msg.objects)
        st.max_hop = max(st.max_hop, msg.hop)
        if src in st.awaiting_agents:
            st.awaiting_agents[src] -= 1
            if st.awaiting_agents[src] <= 0:
                del st.awaiting_agents[src]
        if msg.missing and st.retries < FETCH_RETRY_LIMIT:
            st.retries += 1
            sim.set_timer(self.node_id, "fetch_retry", self.hb.period_us,
                          (self.epoch, msg.request_id, msg.missing))
            return
        self._maybe_finish_search(sim, msg.request_id)

    def _refetch(self, sim, rid: str, st: SearchState, ids) -> None:
        by_owner: dict[NodeId, list[ObjectId]] = {}
        for oid in ids:
            if oid in self.catalogue:
                by_owner.setdefault(self.catalogue.owner_of(oid), []).append(oid)
        for owner in sorted(by_owner):
            batch = tuple(sorted(by_owner[owner]))
            sim.steps.on_fetch_request(rid, self.cluster_tag, owner, len(batch))
            st.awaiting_agents[owner] = st.awaiting_agents.get(owner, 0) + 1
            sim.send(self.node_id, owner, FetchObjects(
                request_id=rid, ids=batch, hop=st.max_hop + 1))

    def _tick_fetch_retry(self, sim, payload):
        epoch, rid, missing = payload
        if epoch != self.epoch or rid not in self.searches:
            return
        st = self.searches[rid]
        self._refetch(sim, rid, st, missing)
        self._maybe_finish_search(sim, rid)

    def _on_RemoteSearchReply(self, sim, msg: RemoteSearchReply, src):
        st = self.searches.get(msg.request_id)
        if st is None:
            return  # first-match already settled
        st.max_hop = max(st.max_hop, msg.hop)
        if st.mode == "first":
            st.awaiting_peers.discard(src)
            if msg.objects:
                st.results = list(msg.objects)
                st.holder = msg.holder
                # tally remote interest; pull the object here when hot
                obj = msg.objects[0]
                if self.hot.record(obj.id) and obj.id not in self.catalogue:
                    self._start_migration(sim, obj.id, src)
                self._finish_search(sim, msg.request_id)
            elif not st.awaiting_peers and not st.awaiting_agents:
                self._finish_search(sim, msg.request_id)
            return
        st.results.extend(msg.objects)
        st.awaiting_peers.discard(src)
        self._maybe_finish_search(sim, msg.request_id)

    def _maybe_finish_search(self, sim, rid: str):
        st = self.searches.get(rid)
        if st is None or st.awaiting_agents or st.awaiting_peers:
            return
        self._finish_search(sim, rid)

    def _finish_search(self, sim, rid: str):
        st = self.searches.pop(rid, None)
        if st is None:
            return
        results = merge_results([st.results])
        if st.remote_origin is not None:
            sim.send(self.node_id, st.remote_origin, RemoteSearchReply(
                request_id=rid, objects=tuple(results), holder=st.holder,
                hop=st.max_hop + 1))
            return
        sim.send(self.node_id, st.route[0], OpReply(
            request_id=rid,
            op="search" if st.mode == "all" else "search_first",
            outcome="ok", route=st.route[1:], objects=tuple(results),
            holder=st.holder, hop=st.max_hop + 1))

    # -- insert ------------------------------------------------------------

    def _should_delegate(self) -> NodeId | None:
        factor = self.config.delegation_factor
        if factor <= 0 or not self.peer_sizes or len(self.catalogue) == 0:
            return None
        sizes = [len(self.catalogue)] + [self.peer_sizes[p]
                                         for p in sorted(self.peer_sizes)]
        mean = sum(sizes) / len(sizes)
        if len(self.catalogue) >= factor * mean:
            size, target = min((s, p) for p, s in sorted(self.peer_sizes.items()))
            if size < len(self.catalogue):
                return target
        return None

    def _on_AgentInsert(self, sim, msg: AgentInsert, src):
        if self.reconfiguring:
            self.deferred.append(msg)
            return
        target = self._should_delegate()
        if target is not None and msg.obj.id not in self.catalogue:
            sim.send(self.node_id, target, DelegateInsert(
                request_id=msg.request_id, obj=msg.obj,
                origin_ragent=self.node_id, agent=msg.agent,
                client=msg.client, hop=msg.hop + 1))
            return
        self._place_insert(sim, msg.request_id, msg.obj,
                           (msg.agent, msg.client), msg.hop)

    def _on_DelegateInsert(self, sim, msg: DelegateInsert, src):
        if self.reconfiguring:
            self.deferred.append(msg)
            return
        self._place_insert(sim, msg.request_id, msg.obj,
                           (msg.origin_ragent, msg.agent, msg.client), msg.hop)

    def _place_insert(self, sim, rid: str, obj: DistObject, route, hop: int):
        def reply(outcome):
            sim.send(self.node_id, route[0], OpReply(
                request_id=rid, op="insert", outcome=outcome,
                route=route[1:], hop=hop + 1))

        if obj.id in self.catalogue:
            reply("duplicate")
            return
        try:
            owner, second = select_replica_holders(self.loads)
        except InsufficientAgents:
            reply("insufficient_agents")
            return
        self.catalogue.insert(obj.id, obj.type_tag, obj.index_keys, [owner, second])
        self.loads.bump(owner)
        self.loads.bump(second)
        for holder in (owner, second):
            sim.send(self.node_id, holder,
                     StoreReplica(obj=obj, request_id=rid, hop=hop + 1))
        self._sync_secondary(sim)
        reply("ok")

    # -- update -------------------------------------------------------------

    def _on_AgentUpdate(self, sim, msg: AgentUpdate, src):
        if self.reconfiguring:
            self.deferred.append(msg)
            return
        self._resolve_update(sim, msg.request_id, msg.oid, msg.payload,
                             msg.agent, msg.client, msg.hop)

    def _resolve_update(self, sim, rid, oid, payload, agent, client, hop):
        if oid in self.catalogue:
            pu = PendingUpdate(request_id=rid, payload=payload,
                               route=(agent, client), hop=hop)
            self._enqueue_update(sim, oid, pu)
            return
        if not self.peers:
            sim.send(self.node_id, agent, OpReply(
                request_id=rid, op="update", outcome="unknown_object",
                route=(client,), hop=hop + 1))
            return
        self.resolutions[rid] = ResolveState(
            oid=oid, payload=payload, agent=agent, client=client,
            awaiting=set(self.peers), hop=hop)
        for p in sorted(self.peers):
            sim.send(self.node_id, p, OwnerQuery(
                request_id=rid, oid=oid, purpose="update", hop=hop + 1))

    def _on_OwnerQuery(self, sim, msg: OwnerQuery, src):
        sim.send(self.node_id, src, OwnerQueryReply(
            request_id=msg.request_id, oid=msg.oid,
            has=msg.oid in self.catalogue, purpose=msg.purpose,
            hop=msg.hop + 1))

    def _on_OwnerQueryReply(self, sim, msg: OwnerQueryReply, src):
        if msg.purpose == "migrate":
            self._migrate_owner_reply(sim, msg, src)
            return
        rs = self.resolutions.get(msg.request_id)
        if rs is None:
            return
        rs.awaiting.discard(src)
        if msg.has and not rs.forwarded:
            rs.forwarded = True
            sim.send(self.node_id, src, ForwardUpdate(
                request_id=msg.request_id, oid=rs.oid, payload=rs.payload,
                origin_ragent=self.node_id, agent=rs.agent, client=rs.client,
                hop=msg.hop + 1))
        self._maybe_finish_resolution(sim, msg.request_id)

    def _maybe_finish_resolution(self, sim, rid: str):
        rs = self.resolutions.get(rid)
        if rs is None or rs.awaiting:
            return
        del self.resolutions[rid]
        if not rs.forwarded:
            sim.send(self.node_id, rs.agent, OpReply(
                request_id=rid, op="update", outcome="unknown_object",
                route=(rs.client,), hop=rs.hop + 1))

    def _on_ForwardUpdate(self, sim, msg: ForwardUpdate, src):
        pu = PendingUpdate(request_id=msg.request_id, payload=msg.payload,
                           route=(msg.origin_ragent, msg.agent, msg.client),
                           hop=msg.hop, origin_ragent=msg.origin_ragent)
        self._enqueue_update(sim, msg.oid, pu)

    def _on_UpdateRetry(self, sim, msg: UpdateRetry, src):
        self._resolve_update(sim, msg.request_id, msg.oid, msg.payload,
                             msg.agent, msg.client, msg.hop)

    def _enqueue_update(self, sim, oid: ObjectId, pu: PendingUpdate):
        if self.locks.acquire(oid, pu):
            self._lock_granted(sim, oid, pu)

    def _lock_granted(self, sim, oid: ObjectId, pu: PendingUpdate):
        if pu.kind == "migrate":
            self._start_migration_export(sim, oid, pu)
            return
        if oid not in self.catalogue:
            # the object moved away (or was lost) while queued
            self._release_lock(sim, oid)
            if pu.origin_ragent is not None:
                sim.send(self.node_id, pu.origin_ragent, UpdateRetry(
                    request_id=pu.request_id, oid=oid, payload=pu.payload,
                    agent=pu.route[-2], client=pu.route[-1], hop=pu.hop))
            else:
                self._resolve_update(sim, pu.request_id, oid, pu.payload,
                                     pu.route[-2], pu.route[-1], pu.hop)
            return
        self.updates[pu.request_id] = UpdateExec(pu=pu, oid=oid)
        sim.send(self.node_id, pu.route[0], ProgressNote(
            request_id=pu.request_id, oid=oid, route=pu.route[1:],
            hop=pu.hop + 1))
        sim.send(self.node_id, self.catalogue.owner_of(oid), ApplyUpdate(
            request_id=pu.request_id, oid=oid, payload=pu.payload,
            hop=pu.hop + 1))

    def _release_lock(self, sim, oid: ObjectId):
        nxt = self.locks.release(oid)
        if nxt is not None:
            self._lock_granted(sim, oid, nxt)

    def _on_ApplyAck(self, sim, msg: ApplyAck, src):
        ue = self.updates.get(msg.request_id)
        if ue is None:
            return
        ue.version = msg.version
        holders = self.catalogue.holders_of(ue.oid) if ue.oid in self.catalogue else []
        others = [h for h in holders if h != src]
        if not others:
            self._finish_update(sim, msg.request_id, "ok")
            return
        ue.awaiting_acks = set(others)
        for h in sorted(others):
            sim.send(self.node_id, h, ReplicaUpdate(
                request_id=msg.request_id, oid=ue.oid, payload=ue.pu.payload,
                version=msg.version, hop=msg.hop + 1))

    def _on_ReplicaUpdateAck(self, sim, msg: ReplicaUpdateAck, src):
        ue = self.updates.get(msg.request_id)
        if ue is None:
            return
        ue.awaiting_acks.discard(src)
        if not ue.awaiting_acks:
            self._finish_update(sim, msg.request_id, "ok")

    def _finish_update(self, sim, rid: str, outcome: str):
        ue = self.updates.pop(rid, None)
        if ue is None:
            return
        pu = ue.pu
        sim.send(self.node_id, pu.route[0], OpReply(
            request_id=rid, op="update", outcome=outcome,
            route=pu.route[1:], version=ue.version, hop=pu.hop + 2))
        self._release_lock(sim, ue.oid)

    def _on_ApplyMissing(self, sim, msg: ApplyMissing, src):
        # the owner's replica was still in flight; retry after a period
        if msg.request_id in self.updates:
            sim.set_timer(self.node_id, "apply_retry", self.hb.period_us,
                          (self.epoch, msg.request_id))

    def _tick_apply_retry(self, sim, payload):
        epoch, rid = payload
        if epoch != self.epoch:
            return
        ue = self.updates.get(rid)
        if ue is None:
            return
        if ue.oid not in self.catalogue:
            ue.version = None
            self._finish_update(sim, rid, "lost")
            return
        sim.send(self.node_id, self.catalogue.owner_of(ue.oid), ApplyUpdate(
            request_id=rid, oid=ue.oid, payload=ue.pu.payload,
            hop=ue.pu.hop + 1))

    # -- migration -----------------------------------------------------------

    def _start_migration(self, sim, oid: ObjectId, target: NodeId):
        self._migseq += 1
        mid = f"{self.node_id.value}.mig{self._migseq}"
        self.in_migrations[mid] = {"oid": oid, "attempts": 1}
        sim.send(self.node_id, target, MigrateRequest(request_id=mid, oid=oid))

    def _on_MigrateRequest(self, sim, msg: MigrateRequest, src):
        if msg.oid not in self.catalogue:
            sim.send(self.node_id, src, MigrateDenied(
                request_id=msg.request_id, oid=msg.oid, hop=msg.hop + 1))
            return
        pu = PendingUpdate(request_id=msg.request_id, payload=b"",
                           route=(src,), kind="migrate")
        self._enqueue_update(sim, msg.oid, pu)

    def _start_migration_export(self, sim, oid: ObjectId, pu: PendingUpdate):
        requester = pu.route[0]
        if oid not in self.catalogue:
            self._release_lock(sim, oid)
            sim.send(self.node_id, requester, MigrateDenied(
                request_id=pu.request_id, oid=oid))
            return
        self.out_migrations[pu.request_id] = (oid, requester)
        sim.send(self.node_id, self.catalogue.owner_of(oid), FetchObjects(
            request_id=pu.request_id, ids=(oid,), purpose="migrate"))

    def _migrate_fetched(self, sim, msg: FetchReply, src):
        entry = self.out_migrations.get(msg.request_id)
        if entry is None:
            return
        oid, requester = entry
        if not msg.objects:
            sim.set_timer(self.node_id, "migrate_fetch_retry",
                          self.hb.period_us, (self.epoch, msg.request_id))
            return
        sim.send(self.node_id, requester, MigrateTransfer(
            request_id=msg.request_id, obj=msg.objects[0]))

    def _tick_migrate_fetch_retry(self, sim, payload):
        epoch, mid = payload
        if epoch != self.epoch or mid not in self.out_migrations:
            return
        oid, requester = self.out_migrations[mid]
        if oid not in self.catalogue:
            del self.out_migrations[mid]
            self._release_lock(sim, oid)
            sim.send(self.node_id, requester, MigrateDenied(request_id=mid, oid=oid))
            return
        sim.send(self.node_id, self.catalogue.owner_of(oid), FetchObjects(
            request_id=mid, ids=(oid,), purpose="migrate"))

    def _on_MigrateTransfer(self, sim, msg: MigrateTransfer, src):
        state = self.in_migrations.pop(msg.request_id, None)
        if state is None:
            return
        obj = msg.obj
        self.hot.reset(obj.id)
        try:
            owner, second = select_replica_holders(self.loads)
            self.catalogue.insert(obj.id, obj.type_tag, obj.index_keys,
                                  [owner, second])
        except (InsufficientAgents, DuplicateObject):
            sim.send(self.node_id, src,
                     MigrateAck(request_id=msg.request_id, oid=obj.id))
            return
        self.loads.bump(owner)
        self.loads.bump(second)
        for holder in (owner, second):
            sim.send(self.node_id, holder, StoreReplica(obj=obj))
        self._sync_secondary(sim)
        sim.send(self.node_id, src, MigrateAck(request_id=msg.request_id, oid=obj.id))
        sim.record_member_event("migrate_in", self.node_id, src,
                                f"object={obj.id.hex[:12]} version={obj.version}")

    def _on_MigrateAck(self, sim, msg: MigrateAck, src):
        entry = self.out_migrations.pop(msg.request_id, None)
        if entry is None:
            return
        oid, _ = entry
        if oid in self.catalogue:
            for h in self.catalogue.holders_of(oid):
                self.loads.bump(h, -1)
                sim.send(self.node_id, h, DropReplica(ids=(oid,)))
            self.catalogue.remove_object(oid)
            self._sync_secondary(sim)
        sim.record_member_event("migrate_out", self.node_id, src,
                                f"object={oid.hex[:12]}")
        self._release_lock(sim, oid)

    def _on_MigrateDenied(self, sim, msg: MigrateDenied, src):
        state = self.in_migrations.get(msg.request_id)
        if state is None:
            return
        if state["attempts"] >= 2:
            del self.in_migrations[msg.request_id]
            self.hot.reset(state["oid"])
            return
        state["attempts"] += 1
        # re-resolve the owning cluster, then retry exactly once
        for p in sorted(self.peers):
            sim.send(self.node_id, p, OwnerQuery(
                request_id=msg.request_id, oid=state["oid"], purpose="migrate"))

    def _migrate_owner_reply(self, sim, msg: OwnerQueryReply, src):
        state = self.in_migrations.get(msg.request_id)
        if state is None or not msg.has or state.get("retried"):
            return
        state["retried"] = True
        sim.send(self.node_id, src, MigrateRequest(
            request_id=msg.request_id, oid=state["oid"]))

    # -- replica copy retries ------------------------------------------------

    def _on_CopyFailed(self, sim, msg: CopyFailed, src):
        sim.set_timer(self.node_id, "copy_retry", self.hb.period_us,
                      (self.epoch, msg.oid, msg.dest, msg.copy_id))

    def _tick_copy_retry(self, sim, payload):
        epoch, oid, dest, copy_id = payload
        if epoch != self.epoch:
            return
        if copy_id is not None:
            # acknowledged re-replication: drop the stale attempt and run
            # a fresh one against the current holder list
            if self.pending_copies.pop(copy_id, None) is None:
                return
            if oid in self.catalogue:
                self._restore_redundancy(sim, oid, self.catalogue.holders_of(oid))
            return
        # fire-and-forget copy issued during a split, where the holder
        # was recorded up front; retry from the current owner
        if oid not in self.catalogue or dest not in self.members:
            return
        attempts = self._copy_attempts.get((oid, dest), 0) + 1
        self._copy_attempts[(oid, dest)] = attempts
        if attempts > COPY_RETRY_LIMIT:
            sim.record_member_event("copy_failed", self.node_id, dest,
                                    f"object={oid.hex[:12]}")
            return
        sim.send(self.node_id, self.catalogue.owner_of(oid),
                 CopyReplica(oid=oid, dest=dest))

    # -- reactive failure handling --------------------------------------------

    def _on_SendFailed(self, sim, msg: SendFailed, src):
        orig, dead = msg.original, msg.dead
        if dead in self.members:
            self._handle_agent_failure(sim, dead, "reactive")
        if isinstance(orig, FetchObjects):
            self._fetch_bounced(sim, orig)
        elif isinstance(orig, ApplyUpdate):
            if orig.request_id in self.updates:
                sim.set_timer(self.node_id, "apply_retry", 0,
                              (self.epoch, orig.request_id))
        elif isinstance(orig, ReplicaUpdate):
            ue = self.updates.get(orig.request_id)
            if ue is not None:
                ue.awaiting_acks.discard(dead)
                if not ue.awaiting_acks:
                    self._finish_update(sim, orig.request_id, "ok")
        elif isinstance(orig, StoreReplica) and orig.request_id:
            if orig.obj.id not in self.catalogue:
                sim.record_loss(orig.obj.id, "insert-holders-crashed")
        elif isinstance(orig, MigrateRequest):
            state = self.in_migrations.pop(orig.request_id, None)
            if state is not None:
                self.hot.reset(state["oid"])
            self._drop_peer(sim, dead)
        elif isinstance(orig, MergeRequest):
            if dead == self.merge_target:
                self.reconfiguring = False
                self.merge_target = None
                self._replay_deferred(sim)
            self._drop_peer(sim, dead)
        elif isinstance(orig, CopyReplica) and orig.copy_id is not None:
            # the copy source died; the membership handler above already
            # re-orphaned its objects if it was still a member, this
            # covers a bounce that raced an earlier detection
            if self.pending_copies.pop(orig.copy_id, None) is not None:
                if orig.oid in self.catalogue:
                    self._restore_redundancy(
                        sim, orig.oid, self.catalogue.holders_of(orig.oid))
        elif isinstance(orig, (RemoteSearch, OwnerQuery, PeerHeartbeat,
                               PeerUpdate, MigrateTransfer, MigrateAck,
                               MigrateDenied, RemoteSearchReply)):
            self._drop_peer(sim, dead)

    def _fetch_bounced(self, sim, orig: FetchObjects):
        if orig.purpose == "migrate":
            entry = self.out_migrations.pop(orig.request_id, None)
            if entry is not None:
                oid, requester = entry
                self._release_lock(sim, oid)
                sim.send(self.node_id, requester,
                         MigrateDenied(request_id=orig.request_id, oid=oid))
            return
        st = self.searches.get(orig.request_id)
        if st is None:
            return
        # drop the expectation on any no-longer-member agent, then fetch
        # the ids again from their repaired owners
        for a in [a for a in sorted(st.awaiting_agents) if a not in self.members]:
            del st.awaiting_agents[a]
        self._refetch(sim, orig.request_id, st, orig.ids)
        self._maybe_finish_search(sim, orig.request_id)

    def _replay_deferred(self, sim):
        pending, self.deferred = self.deferred, []
        for m in pending:
            self.on_message(sim, m, self.node_id)

    # stale messages a super-peer can safely ignore
    def _on_RAgentHeartbeat(self, sim, msg, src):
        pass

    def _on_RAgentDown(self, sim, msg, src):
        pass

    def _on_ConfigUpdate(self, sim, msg, src):
        pass

    def _on_ReassignCluster(self, sim, msg, src):
        pass

    def _on_CatalogueSync(self, sim, msg, src):
        pass

    def _on_JoinAccept(self, sim, msg, src):
        pass

    def _on_JoinRedirect(self, sim, msg, src):
        pass

    def _on_LusQueryReply(self, sim, msg, src):
        pass


def assume_ragent(sim: Simulator, agent: AgentNode, msg: AssumeRAgent) -> RAgentNode:
    """Turn an agent into the super-peer of a freshly split-off cluster."""
    ragent = RAgentNode(NodeId(agent.node_id.value, Role.RAGENT),
                        agent.locality, msg.config)
    ragent.catalogue = msg.catalogue
    ragent.members = set(msg.members)
    loads = AgentLoadTable()
    for a in sorted(ragent.members):
        loads.counts[a] = msg.loads.get(a, 0)
    ragent.loads = loads
    ragent.peers = set(msg.peers)
    ragent.epoch = agent.epoch + 1
    sim.nodes[agent.node_id] = ragent
    agent.store.clear()
    if msg.config.lus_ids:
        sim.send(ragent.node_id, msg.config.lus_ids[0], LusRegister(
            ragent=ragent.node_id, locality=ragent.locality,
            count=len(ragent.members)))
    ragent._elect_secondary(sim)
    for m in sorted(ragent.members):
        sim.send(ragent.node_id, m, ConfigUpdate(
            ragent=ragent.node_id, secondary=ragent.secondary))
    for p in sorted(ragent.peers):
        sim.send(ragent.node_id, p, PeerHeartbeat(
            cat_size=len(ragent.catalogue), member_count=len(ragent.members)))
    sim.record_member_event("assume_ragent", ragent.node_id, ragent.node_id,
                            f"members={len(ragent.members)}")
    ragent.start(sim)
    return ragent


# ---------------------------------------------------------------------
# Client


class ClientNode(BaseNode):
    """Drives scheduled operations through an agent and records their
    completions for the metrics stream."""

    def __init__(self, node_id, locality):
        super().__init__(node_id, locality)
        self.completions: list[dict] = []
        self.progress: dict[str, int] = {}
        self.known_holders: dict[ObjectId, NodeId] = {}
        self._pending: dict[str, dict] = {}

    def run_op(self, sim: Simulator, op: dict) -> None:
        """Execute one scheduled operation; ``op`` carries request_id,
        kind, target agent and the kind-specific fields."""
        rid = op["request_id"]
        self._pending[rid] = op
        kind = op["kind"]
        if kind == "insert":
            sim.send(self.node_id, op["agent"], CInsert(request_id=rid, obj=op["obj"]))
        elif kind in ("search", "search_first"):
            sim.send(self.node_id, op["agent"], CSearch(
                request_id=rid, criterion=op["criterion"],
                mode="all" if kind == "search" else "first"))
        elif kind == "update":
            sim.send(self.node_id, op["agent"], CUpdate(
                request_id=rid, oid=op["oid"], payload=op["payload"]))
        elif kind == "read":
            holder = self.known_holders.get(op["oid"])
            if holder is None:
                self._record(sim, rid, "read", "no_holder", hop=0)
                return
            sim.send(self.node_id, holder, CRead(request_id=rid, oid=op["oid"]))
        else:
            raise ValueError(f"unknown op kind {kind}")

    def on_timer(self, sim, tag, payload):
        if tag == "op":
            self.run_op(sim, payload)

    def _record(self, sim, rid, op, outcome, hop, objects=(), version=None):
        try:
            acct = sim.steps.account_search(rid)
        except Exception:
            acct = None
        rec = {
            "time": sim.clock,
            "op": op,
            "id": rid,
            "steps": acct.measured if acct else 0,
            "bound": acct.bound if acct else 0,
            "decomposed": acct.decomposed if acct else 0,
            "bound_applicable": acct.bound_applicable if acct else False,
            "clusters": acct.clusters if acct else 0,
            "messages": sim.steps.message_count(rid),
            "hops": hop,
            "outcome": outcome,
            "results": len(objects),
            "version": version,
            "progress": self.progress.get(rid, 0),
        }
        self.completions.append(dict(rec, objects=tuple(objects)))
        sim.record_op(**rec)

    def _complete_op(self, sim, msg: OpReply):
        self._pending.pop(msg.request_id, None)
        if msg.holder is not None:
            for obj in msg.objects:
                self.known_holders[obj.id] = msg.holder
        self._record(sim, msg.request_id, msg.op, msg.outcome, msg.hop,
                     objects=msg.objects, version=msg.version)

    def _note_progress(self, sim, msg: ProgressNote):
        self.progress[msg.request_id] = self.progress.get(msg.request_id, 0) + 1

    def _on_ReadReply(self, sim, msg: ReadReply, src):
        self._pending.pop(msg.request_id, None)
        objs = (msg.obj,) if msg.obj is not None else ()
        self._record(sim, msg.request_id, "read", msg.outcome, msg.hop,
                     objects=objs)

    def _on_SendFailed(self, sim, msg: SendFailed, src):
        rid = getattr(msg.original, "request_id", None)
        if rid and rid in self._pending:
            op = self._pending.pop(rid)
            self._record(sim, rid, op["kind"], "agent_down", hop=0)
