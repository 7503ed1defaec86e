"""Expert replication planning and migration scheduling.

The balancer watches per-expert load estimates, decides when imbalance
warrants action, and plans shadow-replica placements.  Two planners are
provided: a greedy one that copies the hottest expert to the coldest
device regardless of distance, and a topology-aware one that offloads
the hottest device to the nearest device that stays below the current
peak heat.

Migrations are decomposed into Local stages (inside one token domain)
and Global stages (domain-boundary crossings only), so that weights can
ride links while they are idle: intra-domain links during attention
all-reduce, boundary links during MoE all-to-all.  Scheduled that way a
migration adds exactly zero wall time.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .collectives import LinkClass, LinkKey
from .errors import ConfigError
from .mapping import TokenDomain
from .topology import DeviceCoord, MeshTopology, transfer_latency

LOCAL = "local"
GLOBAL = "global"

MODE_OFF = "off"
MODE_GREEDY = "greedy"
MODE_TOPO = "topo"
MODE_TOPO_NONINVASIVE = "topo_noninvasive"
MODES = (MODE_OFF, MODE_GREEDY, MODE_TOPO, MODE_TOPO_NONINVASIVE)

DEFAULT_WINDOW = 16
DEFAULT_ALPHA_PER_LAYER = 0.2
DEFAULT_BETA_INVASIVE = 10


def should_trigger(
    per_layer_loads: list, alpha: float, beta: float, iterations_since: float
) -> bool:
    """Cumulative relative imbalance across layers versus a threshold,
    gated by a refractory period measured in iterations."""
    total = 0.0
    for loads in per_layer_loads:
        arr = np.asarray(loads, dtype=float)
        mean = arr.mean() if arr.size else 0.0
        if mean <= 0:
            continue  # silent layer contributes nothing
        total += (arr.max() - mean) / mean
    return bool(total > alpha and iterations_since >= beta)


@dataclass
class LayerBalancerState:
    """Replica placement and slot bookkeeping for one MoE layer."""

    hosts: dict[int, list[DeviceCoord]]  # expert -> devices, index 0 native
    capacity: dict[DeviceCoord, int]  # shadow slots per device
    used: dict[DeviceCoord, int]
    ema: np.ndarray | None = None

    @classmethod
    def from_native(
        cls, native: dict[DeviceCoord, tuple[int, ...]], shadow_slots: int
    ) -> "LayerBalancerState":
        hosts: dict[int, list[DeviceCoord]] = {}
        for dev, experts in native.items():
            for e in experts:
                hosts[e] = [dev]
        return cls(
            hosts={e: hosts[e] for e in sorted(hosts)},
            capacity={dev: shadow_slots for dev in native},
            used={dev: 0 for dev in native},
        )

    def replica_count(self, expert: int) -> int:
        return len(self.hosts[expert])

    def update_ema(self, counts: np.ndarray, window: int = DEFAULT_WINDOW) -> None:
        counts = np.asarray(counts, dtype=float)
        if self.ema is None:
            self.ema = counts.copy()
        else:
            self.ema += (counts - self.ema) / window

    def free_slots(self) -> int:
        return sum(self.capacity[d] - self.used[d] for d in self.capacity)


def device_heats(
    hosts: dict[int, list[DeviceCoord]],
    loads: np.ndarray,
    devices,
) -> dict[DeviceCoord, float]:
    """heat_d = sum of per-replica load shares hosted on d."""
    heat = {d: 0.0 for d in devices}
    for e, devs in hosts.items():
        share = float(loads[e]) / len(devs)
        for d in devs:
            heat[d] += share
    return heat


@dataclass(frozen=True)
class Move:
    expert: int
    src: DeviceCoord
    dst: DeviceCoord


@dataclass
class MigrationPlan:
    moves: list[Move] = field(default_factory=list)
    final_heats: dict[DeviceCoord, float] = field(default_factory=dict)

    def __bool__(self) -> bool:
        return bool(self.moves)


def _hottest(heat: dict[DeviceCoord, float], topo: MeshTopology) -> DeviceCoord:
    return max(heat, key=lambda d: (heat[d], -topo.linear_index(d)))


def greedy_rebalance(
    state: LayerBalancerState, loads: np.ndarray, topo: MeshTopology
) -> MigrationPlan:
    """Copy the hottest device's heaviest per-replica expert to the
    globally coldest device with a free slot, however far away, while
    that still lowers the peak."""
    hosts = {e: list(devs) for e, devs in state.hosts.items()}
    used = dict(state.used)
    devices = list(state.capacity)
    plan = MigrationPlan()
    for _ in range(state.free_slots()):
        heat = device_heats(hosts, loads, devices)
        hot_dev = _hottest(heat, topo)
        max_heat = heat[hot_dev]
        if max_heat <= 0:
            break
        resident = [e for e, devs in hosts.items() if hot_dev in devs]
        expert = max(resident, key=lambda e: (float(loads[e]) / len(hosts[e]), -e))
        share_after = float(loads[expert]) / (len(hosts[expert]) + 1)
        pool = [
            d
            for d in devices
            if d not in hosts[expert] and used[d] < state.capacity[d]
        ]
        if not pool:
            break
        dst = min(pool, key=lambda d: (heat[d], topo.linear_index(d)))
        if heat[dst] + share_after >= max_heat:
            break
        plan.moves.append(Move(expert, hot_dev, dst))
        hosts[expert].append(dst)
        used[dst] += 1
    plan.final_heats = device_heats(hosts, loads, devices)
    return plan


def topology_aware_rebalance(
    state: LayerBalancerState, loads: np.ndarray, topo: MeshTopology
) -> MigrationPlan:
    """Offload the hottest device: its heaviest per-replica expert gains
    a shadow on the nearest device that stays under the current peak."""
    hosts = {e: list(devs) for e, devs in state.hosts.items()}
    used = dict(state.used)
    devices = list(state.capacity)
    plan = MigrationPlan()
    for _ in range(state.free_slots()):
        heat = device_heats(hosts, loads, devices)
        hot_dev = _hottest(heat, topo)
        max_heat = heat[hot_dev]
        if max_heat <= 0:
            break
        resident = [e for e, devs in hosts.items() if hot_dev in devs]
        expert = max(resident, key=lambda e: (float(loads[e]) / len(hosts[e]), -e))
        share_after = float(loads[expert]) / (len(hosts[expert]) + 1)
        pool = [
            d
            for d in devices
            if d not in hosts[expert]
            and used[d] < state.capacity[d]
            and heat[d] + share_after < max_heat
        ]
        if not pool:
            break
        dst = min(
            pool, key=lambda d: (topo.manhattan_hops(hot_dev, d), topo.linear_index(d))
        )
        plan.moves.append(Move(expert, hot_dev, dst))
        hosts[expert].append(dst)
        used[dst] += 1
    plan.final_heats = device_heats(hosts, loads, devices)
    return plan


def evict_coldest_replica(
    state: LayerBalancerState, loads: np.ndarray
) -> tuple[int, DeviceCoord] | None:
    """Drop the shadow replica with the smallest load share; pure
    metadata, no weights move.  Returns what was evicted, if anything."""
    best = None
    for e, devs in state.hosts.items():
        share = float(loads[e]) / len(devs)
        for d in devs[1:]:  # index 0 is the native copy
            key = (share, e, (d.wafer, d.y, d.x))
            if best is None or key < best[0]:
                best = (key, e, d)
    if best is None:
        return None
    _, e, d = best
    state.hosts[e].remove(d)
    state.used[d] -= 1
    return e, d


@dataclass(frozen=True)
class MigrationStage:
    kind: str  # LOCAL or GLOBAL
    path: tuple[DeviceCoord, ...]  # waypoints, len >= 2

    @property
    def hops(self) -> int:
        return len(self.path) - 1

    def links(self) -> list[LinkKey]:
        return list(zip(self.path, self.path[1:]))


@dataclass(frozen=True)
class StagedMove:
    move: Move
    stages: tuple[MigrationStage, ...]
    volume: float  # expert weight bytes

    @property
    def total_hops(self) -> int:
        return sum(s.hops for s in self.stages)

    def hop_bytes(self) -> float:
        return self.total_hops * self.volume


def _region_lookup(ftds: tuple[TokenDomain, ...]) -> dict[DeviceCoord, int]:
    out: dict[DeviceCoord, int] = {}
    for i, dom in enumerate(ftds):
        for c in dom.region:
            out[c] = i
    return out


def _rect(dom: TokenDomain) -> tuple[int, int, int, int]:
    xs = [c.x for c in dom.region]
    ys = [c.y for c in dom.region]
    return min(xs), max(xs), min(ys), max(ys)


def _waypoints(route) -> list[DeviceCoord]:
    return [route[0].src] + [l.dst for l in route]


def _stages_from_route(
    src: DeviceCoord, dst: DeviceCoord, region_of, topo: MeshTopology
) -> list[MigrationStage]:
    # group consecutive route links by class; robust fallback path
    stages: list[MigrationStage] = []
    for link in topo.route_xy(src, dst):
        kind = LOCAL if region_of[link.src] == region_of[link.dst] else GLOBAL
        if stages and stages[-1].kind == kind:
            prev = stages.pop()
            stages.append(MigrationStage(kind, prev.path + (link.dst,)))
        else:
            stages.append(MigrationStage(kind, (link.src, link.dst)))
    return stages


def decompose_migration(
    move: Move, ftds: tuple[TokenDomain, ...], topo: MeshTopology, volume: float
) -> StagedMove:
    """Split a weight copy into Local and Global stages.

    Local stages stay inside one token domain; Global stages consist of
    boundary-crossing links only.  Diagonal domain steps chain an X and
    a Y crossing at the shared corner, giving the canonical
    Local-Global-Local shape; runs spanning several domains in a
    straight line must alternate Local and Global stages instead.
    """
    region_of = _region_lookup(ftds)
    if move.src not in region_of or move.dst not in region_of:
        raise ConfigError("migration endpoints must lie inside known token domains")
    if region_of[move.src] == region_of[move.dst]:
        route = topo.route_xy(move.src, move.dst)
        stages = (MigrationStage(LOCAL, tuple(_waypoints(route))),) if route else ()
        return StagedMove(move, stages, volume)
    if move.src.wafer != move.dst.wafer:
        return StagedMove(
            move, tuple(_stages_from_route(move.src, move.dst, region_of, topo)), volume
        )

    dst_rect = _rect(ftds[region_of[move.dst]])
    stages: list[MigrationStage] = []
    cur = move.src
    guard = len(ftds) * 4
    while region_of[cur] != region_of[move.dst] and guard:
        guard -= 1
        x0, x1, y0, y1 = _rect(ftds[region_of[cur]])
        sx = 1 if dst_rect[0] > x1 else -1 if dst_rect[1] < x0 else 0
        sy = 1 if dst_rect[2] > y1 else -1 if dst_rect[3] < y0 else 0
        if not sx and not sy:
            # rectangles overlap on both axes; no corner staircase exists
            return StagedMove(
                move,
                tuple(_stages_from_route(move.src, move.dst, region_of, topo)),
                volume,
            )
        ex = (x1 if sx > 0 else x0) if sx else cur.x
        ey = (y1 if sy > 0 else y0) if sy else cur.y
        exit_dev = DeviceCoord(cur.wafer, ex, ey)
        if exit_dev != cur:
            stages.append(
                MigrationStage(LOCAL, tuple(_waypoints(topo.route_xy(cur, exit_dev))))
            )
        hop = [exit_dev]
        if sx:
            hop.append(DeviceCoord(cur.wafer, ex + sx, ey))
        if sy:
            hop.append(DeviceCoord(cur.wafer, hop[-1].x, ey + sy))
        crossing = MigrationStage(GLOBAL, tuple(hop))
        if any(region_of[a] == region_of[b] for a, b in crossing.links()):
            # grid not aligned for corner chaining; fall back to routed stages
            return StagedMove(
                move,
                tuple(_stages_from_route(move.src, move.dst, region_of, topo)),
                volume,
            )
        if stages and stages[-1].kind == GLOBAL and stages[-1].path[-1] == hop[0]:
            prev = stages.pop()
            crossing = MigrationStage(GLOBAL, prev.path + tuple(hop[1:]))
        stages.append(crossing)
        cur = crossing.path[-1]
    if not guard:
        raise ConfigError("migration staging failed to converge")
    if cur != move.dst:
        stages.append(
            MigrationStage(LOCAL, tuple(_waypoints(topo.route_xy(cur, move.dst))))
        )
    return StagedMove(move, tuple(stages), volume)


def invasive_stall(staged: StagedMove, topo: MeshTopology) -> float:
    """Critical-path time to push the whole expert over its route."""
    links = [topo.link(a, b) for st in staged.stages for a, b in st.links()]
    if not links:
        return 0.0
    bw = min(l.bandwidth for l in links)
    return transfer_latency(staged.volume, bw, links[0].link_latency, len(links))


@dataclass
class PhaseWindows:
    """Idle-capacity windows one iteration offers to migration traffic."""

    attention_seconds: float
    moe_seconds: float


@dataclass
class ActiveMigration:
    staged: StagedMove
    layer: int
    stage_idx: int = 0
    sent: float = 0.0  # bytes completed in the current stage
    completion_iteration: int | None = None

    @property
    def done(self) -> bool:
        return self.completion_iteration is not None


def advance_migration(
    am: ActiveMigration,
    windows: PhaseWindows,
    spare_attention: dict[LinkKey, float],
    spare_moe: dict[LinkKey, float],
    attention_class: LinkClass,
    moe_class: LinkClass,
    iteration: int,
) -> dict[LinkKey, float]:
    """Move one iteration's worth of migration bytes over idle capacity.

    Local stages draw on the attention window, Global stages on the MoE
    window.  A stage never touches a link that is hot for its phase; a
    hot link stalls the move until traffic shifts.  Returns the bytes
    placed on each link this iteration.
    """
    moved: dict[LinkKey, float] = {}
    if am.done:
        return moved
    budget = {LOCAL: windows.attention_seconds, GLOBAL: windows.moe_seconds}
    while am.stage_idx < len(am.staged.stages):
        stage = am.staged.stages[am.stage_idx]
        spare = spare_attention if stage.kind == LOCAL else spare_moe
        cls = attention_class if stage.kind == LOCAL else moe_class
        links = stage.links()
        if any(not cls.usable(k) for k in links):
            break  # blocked behind hot links this iteration
        rate = min(spare.get(k, 0.0) for k in links)
        if rate <= 0 or budget[stage.kind] <= 0:
            break
        remaining = am.staged.volume - am.sent
        chunk = min(remaining, rate * budget[stage.kind])
        budget[stage.kind] -= chunk / rate
        am.sent += chunk
        for k in links:
            moved[k] = moved.get(k, 0.0) + chunk
        if am.sent < am.staged.volume - 1e-9:
            break  # window exhausted mid-stage
        am.stage_idx += 1
        am.sent = 0.0
    if am.stage_idx >= len(am.staged.stages):
        am.completion_iteration = iteration
    return moved
