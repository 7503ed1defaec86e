"""Iteration-level simulation: rooflines, phase pipelining, balancing loop.

Each iteration walks the model layer by layer.  Every layer runs an
attention phase (attention compute overlapped with the tensor-parallel
all-reduce); sparse layers add a MoE phase (expert compute overlapped
with all-to-all dispatch and combine).  Micro-batch pipelining hides the
shorter stream behind the longer one except for a single fill stage.

The balancer hooks in between iterations: load statistics are smoothed,
the trigger condition is evaluated, and planned expert copies either
stall the critical path (invasive modes) or trickle over idle links
during matching phases (non-invasive mode) and take effect only once
the last stage lands.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .balancer import (
    DEFAULT_ALPHA_PER_LAYER,
    DEFAULT_BETA_INVASIVE,
    DEFAULT_WINDOW,
    LOCAL,
    MODE_GREEDY,
    MODE_OFF,
    MODE_TOPO,
    MODE_TOPO_NONINVASIVE,
    MODES,
    ActiveMigration,
    LayerBalancerState,
    PhaseWindows,
    advance_migration,
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
    LinkKey,
    classify_links,
    plan_all_to_all,
    plan_entwined_allreduce,
    plan_hier_allreduce,
)
from .errors import ConfigError
from .mapping import HIER_ER, Mapping, compute_ftds
from .topology import DeviceCoord, MeshTopology
from .workload import GatingModel, ModelSpec, evolve_popularity, gate_tokens

TOKEN_BYTES_PER_ELEM = 2.0  # FP16 activations on the wire


@dataclass(frozen=True)
class ComputeModel:
    """Device compute/memory rates and the attention cost coefficients."""

    peak_flops: float = 2250e12
    mem_bandwidth: float = 8e12
    attn_flops_coeff: float = 8.0  # flops per token = coeff * hidden^2
    attn_bytes_coeff: float = 8.0  # resident bytes = coeff * hidden^2

    def __post_init__(self) -> None:
        if self.peak_flops <= 0 or self.mem_bandwidth <= 0:
            raise ConfigError("compute model rates must be positive")


def compute_time_moe(
    tokens: float, active_experts: int, expert_bytes: float, model: ComputeModel
) -> float:
    """Expert-FFN roofline for one device.

    INT8 expert weights hold one parameter per byte; weights of every
    expert that sees at least one token must stream from memory once.
    """
    if tokens < 0:
        raise ConfigError("token count must be non-negative")
    flops = 2.0 * tokens * expert_bytes
    resident = active_experts * expert_bytes
    return max(flops / model.peak_flops, resident / model.mem_bandwidth)


def compute_time_attention(
    tokens: float, hidden: int, model: ComputeModel, tp: int = 1
) -> float:
    """Attention-block roofline; weights and work split across tp ranks."""
    if tokens < 0:
        raise ConfigError("token count must be non-negative")
    if tokens == 0:
        return 0.0
    weight = hidden * hidden / tp
    flops = model.attn_flops_coeff * tokens * weight
    resident = model.attn_bytes_coeff * weight
    return max(flops / model.peak_flops, resident / model.mem_bandwidth)


def pipeline_time(compute: float, comm: float, micro_batches: int) -> float:
    """Two-stream pipeline: the longer stream plus one fill stage of the
    shorter one.  One micro-batch degenerates to plain serialization."""
    if micro_batches < 1:
        raise ConfigError("micro_batches must be >= 1")
    lo, hi = sorted((compute, comm))
    return hi + lo / micro_batches


@dataclass
class SimulationSettings:
    micro_batches: int = 1
    with_allgather: bool = True
    balancer_mode: str = MODE_OFF
    alpha: float | None = None  # default 0.2 per sparse layer
    beta: float | None = None  # default 0 non-invasive, 10 invasive
    shadow_slots: int = 1
    ema_window: int = DEFAULT_WINDOW
    cold_threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.balancer_mode not in MODES:
            raise ConfigError(
                f"unknown balancer mode {self.balancer_mode!r}; valid: {', '.join(MODES)}"
            )
        if self.micro_batches < 1:
            raise ConfigError("micro_batches must be >= 1")
        if self.shadow_slots < 0:
            raise ConfigError("shadow_slots must be >= 0")


@dataclass
class LayerPhase:
    """Timing breakdown of one sparse layer."""

    attention_compute: float
    allreduce: float
    attention_phase: float
    dispatch: float
    combine: float
    expert_compute: float
    moe_phase: float


@dataclass
class IterationMetrics:
    iteration: int
    wall_time: float
    attention_time: float  # all layers' attention phases
    moe_time: float  # all sparse layers' MoE phases
    migration_overhead: float  # invasive stalls on the critical path
    imbalance: float  # mean over layers of device max/mean - 1
    trigger: bool
    moves_issued: int
    moves_completed: int
    migration_bytes_in_flight: float
    hot_migration_bytes: float  # bytes placed on hot links (must stay 0)
    device_tokens: dict[DeviceCoord, float]
    link_bytes: dict[LinkKey, float]  # collectives plus migration traffic
    migration_link_bytes: dict[LinkKey, float]
    layers: tuple[LayerPhase, ...]


@dataclass
class SimulationResult:
    trace: list[IterationMetrics]
    aggregates: dict[str, float]


def expert_demands(
    counts: np.ndarray,
    hosts: dict[int, list[DeviceCoord]],
    dp: int,
    token_bytes: float,
) -> list[tuple[DeviceCoord, int, float]]:
    """All-to-all demand list for one layer: every replica of an expert
    serves an equal token share, drawn evenly from all dp groups."""
    demands = []
    for e, devs in hosts.items():
        tokens = float(counts[e])
        if tokens <= 0:
            continue
        per_group = tokens / len(devs) / dp
        volume = per_group * token_bytes
        for dev in devs:
            for g in range(dp):
                demands.append((dev, g, volume))
    return demands


class Simulation:
    """Mutable run state: gating, per-layer replica placements, in-flight
    migrations, and the cached attention-phase quantities."""

    def __init__(
        self,
        topo: MeshTopology,
        mapping: Mapping,
        model: ModelSpec,
        gating: GatingModel,
        compute: ComputeModel | None = None,
        settings: SimulationSettings | None = None,
    ) -> None:
        self.topo = topo
        self.mapping = mapping
        self.model = model
        self.gating = gating
        self.compute = compute or ComputeModel()
        self.settings = settings or SimulationSettings()
        if mapping.n_experts != model.n_experts:
            raise ConfigError(
                f"mapping hosts {mapping.n_experts} experts but the model has {model.n_experts}"
            )
        if gating.n_layers != model.moe_layers:
            raise ConfigError(
                f"gating covers {gating.n_layers} layers but the model has {model.moe_layers} sparse layers"
            )
        cfg = mapping.cfg
        self.total_tokens = cfg.dp * cfg.tokens_per_tp_group
        self.token_bytes = self.model.hidden_dim * TOKEN_BYTES_PER_ELEM
        self.ftds = compute_ftds(mapping, topo)
        self.states = [
            LayerBalancerState.from_native(mapping.native_experts, self.settings.shadow_slots)
            for _ in range(model.moe_layers)
        ]
        self.active: list[ActiveMigration] = []
        self.last_migration: int | None = None
        self.alpha = (
            self.settings.alpha
            if self.settings.alpha is not None
            else DEFAULT_ALPHA_PER_LAYER * model.moe_layers
        )
        if self.settings.beta is not None:
            self.beta = self.settings.beta
        else:
            self.beta = 0 if self.settings.balancer_mode == MODE_TOPO_NONINVASIVE else DEFAULT_BETA_INVASIVE

        ar_volume = cfg.tokens_per_tp_group * self.token_bytes
        self.ar_plan = self._allreduce_plan(ar_volume)
        self.ar_latency = self.ar_plan.latency(topo)
        self.ar_link_bytes = self.ar_plan.link_bytes(topo)
        self.att_compute = compute_time_attention(
            cfg.tokens_per_tp_group, model.hidden_dim, self.compute, cfg.tp
        )
        self.attention_phase = pipeline_time(
            self.att_compute, self.ar_latency, self.settings.micro_batches
        )

    def _allreduce_plan(self, volume: float) -> CollectivePlan:
        if self.mapping.layout == HIER_ER:
            return plan_hier_allreduce(
                self.mapping, self.topo, volume, self.settings.with_allgather
            )
        return plan_entwined_allreduce(
            self.mapping, self.topo, volume, self.settings.with_allgather
        )


def _merge(into: dict[LinkKey, float], src: dict[LinkKey, float]) -> None:
    for k, v in src.items():
        into[k] = into.get(k, 0.0) + v


def run_iteration(sim: Simulation, iteration: int) -> IterationMetrics:
    topo, model, st = sim.topo, sim.model, sim.settings
    cfg = sim.mapping.cfg
    link_bytes: dict[LinkKey, float] = {}
    layers: list[LayerPhase] = []
    device_tokens: dict[DeviceCoord, float] = {d: 0.0 for d in topo.devices()}
    per_layer_counts: list[np.ndarray] = []
    imbalance_terms: list[float] = []
    moe_time = 0.0
    moe_comm_bytes: dict[LinkKey, float] = {}

    n_layers = model.n_layers
    attention_time = n_layers * sim.attention_phase
    for _ in range(n_layers):
        _merge(link_bytes, sim.ar_link_bytes)

    for layer in range(model.moe_layers):
        counts = gate_tokens(
            sim.gating, layer, iteration, sim.total_tokens, model.top_k
        )
        per_layer_counts.append(counts)
        state = sim.states[layer]
        demands = expert_demands(counts, state.hosts, cfg.dp, sim.token_bytes)
        dispatch = plan_all_to_all(
            sim.mapping, topo, demands, gathered=st.with_allgather, name="dispatch"
        )
        combine = dispatch.reversed()
        dispatch_lat = dispatch.latency(topo)
        combine_lat = combine.latency(topo)

        loads = device_heats(state.hosts, counts, state.capacity)
        active = {d: 0 for d in state.capacity}
        for e, devs in state.hosts.items():
            if counts[e] > 0:
                for d in devs:
                    active[d] += 1
        expert_compute = max(
            compute_time_moe(loads[d], active[d], model.expert_bytes, sim.compute)
            for d in state.capacity
        )
        moe_phase = pipeline_time(
            expert_compute, dispatch_lat + combine_lat, st.micro_batches
        )
        moe_time += moe_phase
        layers.append(
            LayerPhase(
                attention_compute=sim.att_compute,
                allreduce=sim.ar_latency,
                attention_phase=sim.attention_phase,
                dispatch=dispatch_lat,
                combine=combine_lat,
                expert_compute=expert_compute,
                moe_phase=moe_phase,
            )
        )
        for plan in (dispatch, combine):
            _merge(moe_comm_bytes, plan.link_bytes(topo))
        for d, v in loads.items():
            device_tokens[d] += v
        mean = float(np.mean(list(loads.values())))
        if mean > 0:
            imbalance_terms.append(max(loads.values()) / mean - 1.0)
        state.update_ema(counts, st.ema_window)
    _merge(link_bytes, moe_comm_bytes)

    wall = attention_time + moe_time
    imbalance = float(np.mean(imbalance_terms)) if imbalance_terms else 0.0

    # migration stream: advance in-flight copies over idle capacity
    migration_link_bytes: dict[LinkKey, float] = {}
    hot_migration = 0.0
    completed = 0
    if sim.active:
        att_window = attention_time
        moe_window = moe_time
        duty_att = _window_duty(sim.ar_link_bytes, n_layers, att_window, topo)
        duty_moe = _window_duty(moe_comm_bytes, 1, moe_window, topo)
        cls_att, cls_moe = classify_links(duty_att, duty_moe, topo, st.cold_threshold)
        spare_att = _spare_rates(duty_att, topo)
        spare_moe = _spare_rates(duty_moe, topo)
        windows = PhaseWindows(att_window, moe_window)
        for am in sim.active:
            moved = advance_migration(
                am, windows, spare_att, spare_moe, cls_att, cls_moe, iteration
            )
            _merge(migration_link_bytes, moved)
            # tripwire: bytes on a link hot for its stage's phase type
            for stage in am.staged.stages:
                cls = cls_att if stage.kind == LOCAL else cls_moe
                for key in stage.links():
                    if key in moved and not cls.usable(key):
                        hot_migration += moved[key]
        for am in [a for a in sim.active if a.done]:
            state = sim.states[am.layer]
            mv = am.staged.move
            state.hosts[mv.expert].append(mv.dst)
            state.used[mv.dst] += 1
            completed += 1
        sim.active = [a for a in sim.active if not a.done]
    _merge(link_bytes, migration_link_bytes)
    in_flight = sum(a.staged.volume - a.sent for a in sim.active)

    # trigger evaluation on smoothed loads, then planning
    trigger = False
    moves_issued = 0
    overhead = 0.0
    if st.balancer_mode != MODE_OFF:
        per_layer_dev = []
        for state in sim.states:
            ema = state.ema if state.ema is not None else np.zeros(model.n_experts)
            heats = device_heats(state.hosts, ema, state.capacity)
            per_layer_dev.append(list(heats.values()))
        since = (
            float("inf") if sim.last_migration is None else iteration - sim.last_migration
        )
        trigger = should_trigger(per_layer_dev, sim.alpha, sim.beta, since)
        if trigger and not sim.active:
            invasive = st.balancer_mode in (MODE_GREEDY, MODE_TOPO)
            planner = (
                greedy_rebalance if st.balancer_mode == MODE_GREEDY else topology_aware_rebalance
            )
            for layer, state in enumerate(sim.states):
                ema = state.ema if state.ema is not None else np.zeros(model.n_experts)
                if state.free_slots() == 0:
                    evict_coldest_replica(state, ema)
                plan = planner(state, ema, topo)
                for mv in plan.moves:
                    staged = decompose_migration(mv, sim.ftds, topo, model.expert_bytes)
                    moves_issued += 1
                    if invasive:
                        overhead += invasive_stall(staged, topo)
                        _merge(link_bytes, _staged_bytes(staged))
                        state.hosts[mv.expert].append(mv.dst)
                        state.used[mv.dst] += 1
                    else:
                        sim.active.append(ActiveMigration(staged, layer))
            if moves_issued:
                sim.last_migration = iteration
    wall += overhead

    return IterationMetrics(
        iteration=iteration,
        wall_time=wall,
        attention_time=attention_time,
        moe_time=moe_time,
        migration_overhead=overhead,
        imbalance=imbalance,
        trigger=trigger,
        moves_issued=moves_issued,
        moves_completed=completed,
        migration_bytes_in_flight=in_flight,
        hot_migration_bytes=hot_migration,
        device_tokens=device_tokens,
        link_bytes=link_bytes,
        migration_link_bytes=migration_link_bytes,
        layers=tuple(layers),
    )


def _window_duty(
    comm_bytes: dict[LinkKey, float], repeats: int, window: float, topo: MeshTopology
) -> dict[LinkKey, float]:
    """Busy fraction of a phase window, from bytes carried during it."""
    if window <= 0:
        return {k: 0.0 for k in comm_bytes}
    out = {}
    for key, v in comm_bytes.items():
        bw = topo.links[key].bandwidth
        out[key] = v * repeats / bw / window
    return out


def _spare_rates(duty: dict[LinkKey, float], topo: MeshTopology) -> dict[LinkKey, float]:
    return {
        key: link.bandwidth * max(0.0, 1.0 - duty.get(key, 0.0))
        for key, link in topo.links.items()
    }


def _staged_bytes(staged) -> dict[LinkKey, float]:
    out: dict[LinkKey, float] = {}
    for stage in staged.stages:
        for key in stage.links():
            out[key] = out.get(key, 0.0) + staged.volume
    return out


def run_simulation(
    topo: MeshTopology,
    mapping: Mapping,
    model: ModelSpec,
    gating: GatingModel,
    compute: ComputeModel | None = None,
    settings: SimulationSettings | None = None,
    iterations: int = 1,
) -> SimulationResult:
    """Sequential seeded run; gating drifts between iterations."""
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    sim = Simulation(topo, mapping, model, gating, compute, settings)
    trace: list[IterationMetrics] = []
    for it in range(iterations):
        trace.append(run_iteration(sim, it))
        sim.gating = evolve_popularity(sim.gating, it)  # drift between iterations

    walls = np.array([m.wall_time for m in trace])
    total_wall = float(walls.sum())
    moe_tokens = iterations * sim.total_tokens * model.top_k * model.moe_layers
    aggregates = {
        "iterations": float(iterations),
        "wall_total": total_wall,
        "wall_mean": float(walls.mean()),
        "wall_p50": float(np.percentile(walls, 50)),
        "wall_p95": float(np.percentile(walls, 95)),
        "wall_p99": float(np.percentile(walls, 99)),
        "attention_time_mean": float(np.mean([m.attention_time for m in trace])),
        "moe_time_mean": float(np.mean([m.moe_time for m in trace])),
        "migration_overhead_total": float(sum(m.migration_overhead for m in trace)),
        "moves_issued": float(sum(m.moves_issued for m in trace)),
        "moves_completed": float(sum(m.moves_completed for m in trace)),
        "imbalance_first": trace[0].imbalance,
        "imbalance_last": trace[-1].imbalance,
        "device_tokens_per_s": (
            moe_tokens / topo.device_count / total_wall if total_wall > 0 else 0.0
        ),
    }
    return SimulationResult(trace=trace, aggregates=aggregates)
