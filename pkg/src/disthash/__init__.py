"""Hierarchical cluster protocol with a meta-data catalogue per
super-peer, replicated object storage, fault recovery, and a
deterministic discrete-event simulator that accounts every search step
against the closed-form cost bound.
"""
from .catalogue import AgentLoadTable, MetaCatalogue, clog2
from .core import (DistObject, KeyKind, LocalityDescriptor, NodeId, ObjectId,
                   PatternKey, Role, derive_object_id, make_object,
                   proximity_rank)
from .dataops import (REPLICATION_FACTOR, HotCounter, LockTable,
                      merge_results, select_replica_holders)
from .lus import LusRegistry
from .membership import (HeartbeatConfig, Thresholds, choose_merge_target,
                         elect_agent, join_select_ragent, split_partition)
from .nodes import AgentNode, ClientNode, ClusterConfig, LusNode, RAgentNode
from .runner import (RunResult, build_simulation, check_invariants,
                     format_metrics, run_scenario, schedule_events)
from .scenario import (Scenario, ScenarioConfig, ScenarioError,
                       format_scenario, parse_scenario)
from .sim import (MS, NetworkModel, SearchAccounting, Simulator, StepCounter,
                  formula_bound, ideal_search_steps)

__all__ = [
    "AgentLoadTable", "AgentNode", "ClientNode", "ClusterConfig",
    "DistObject", "HeartbeatConfig", "HotCounter", "KeyKind",
    "LocalityDescriptor", "LockTable", "LusNode", "LusRegistry", "MS",
    "MetaCatalogue", "NetworkModel", "NodeId", "ObjectId", "PatternKey",
    "RAgentNode", "REPLICATION_FACTOR", "Role", "RunResult", "Scenario",
    "ScenarioConfig", "ScenarioError", "SearchAccounting", "Simulator",
    "StepCounter", "Thresholds", "build_simulation", "check_invariants",
    "choose_merge_target", "clog2", "derive_object_id", "elect_agent",
    "format_metrics", "format_scenario", "formula_bound",
    "ideal_search_steps", "join_select_ragent", "make_object",
    "merge_results", "parse_scenario", "proximity_rank", "run_scenario",
    "schedule_events", "select_replica_holders", "split_partition",
]
