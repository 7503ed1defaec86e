"""Analytical simulator for expert-parallel MoE inference on wafer-scale
2D meshes: interleaved TP placement, phased collective plans, expert
rebalancing with hidden migration, and a deterministic iteration engine.
"""
from .balancer import (
    LayerBalancerState,
    MigrationPlan,
    Move,
    decompose_migration,
    device_heats,
    evict_coldest_replica,
    greedy_rebalance,
    invasive_stall,
    should_trigger,
    topology_aware_rebalance,
)
from .collectives import (
    CollectivePlan,
    LinkClass,
    PlanPhase,
    TrafficMatrix,
    Transfer,
    classify_links,
    complementarity_report,
    link_duty,
    plan_all_to_all,
    plan_entwined_allreduce,
    plan_hier_allreduce,
    plan_ring_allreduce,
)
from .config import Scenario, SimConfig, build_scenario, parse_config
from .engine import (
    ComputeModel,
    IterationMetrics,
    Simulation,
    SimulationResult,
    SimulationSettings,
    compute_time_attention,
    compute_time_moe,
    pipeline_time,
    run_simulation,
)
from .errors import ConfigError
from .mapping import (
    Mapping,
    ParallelismConfig,
    TokenDomain,
    avg_hops,
    baseline_mapping,
    compute_ftds,
    er_mapping,
    ftd_intersections,
    hier_er_mapping,
    make_mapping,
    render_ascii,
)
from .topology import DeviceCoord, Link, MeshTopology, build_mesh, transfer_latency
from .workload import (
    GatingModel,
    ModelSpec,
    gate_tokens,
    get_preset,
    make_gating,
)

__version__ = "0.1.0"

__all__ = [
    "CollectivePlan",
    "ComputeModel",
    "ConfigError",
    "DeviceCoord",
    "GatingModel",
    "IterationMetrics",
    "LayerBalancerState",
    "Link",
    "LinkClass",
    "Mapping",
    "MeshTopology",
    "MigrationPlan",
    "ModelSpec",
    "Move",
    "ParallelismConfig",
    "PlanPhase",
    "Scenario",
    "SimConfig",
    "Simulation",
    "SimulationResult",
    "SimulationSettings",
    "TokenDomain",
    "TrafficMatrix",
    "Transfer",
    "avg_hops",
    "baseline_mapping",
    "build_mesh",
    "build_scenario",
    "classify_links",
    "complementarity_report",
    "compute_ftds",
    "compute_time_attention",
    "compute_time_moe",
    "decompose_migration",
    "device_heats",
    "er_mapping",
    "evict_coldest_replica",
    "ftd_intersections",
    "gate_tokens",
    "get_preset",
    "greedy_rebalance",
    "hier_er_mapping",
    "invasive_stall",
    "link_duty",
    "make_gating",
    "make_mapping",
    "parse_config",
    "pipeline_time",
    "plan_all_to_all",
    "plan_entwined_allreduce",
    "plan_hier_allreduce",
    "plan_ring_allreduce",
    "render_ascii",
    "run_simulation",
    "should_trigger",
    "topology_aware_rebalance",
    "transfer_latency",
]
