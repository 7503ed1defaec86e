"""Communication plans for all-reduce and token exchange on the mesh.

A plan is a sequence of phases; transfers inside one phase run in
parallel and never share a directed link (ring plans are constructed to
guarantee this, `conflicts` verifies it).  Ring steps between non
adjacent members are decomposed into single-hop sub-phases so that the
latency of an interleaved ring is exactly the tile pitch times that of
an adjacent ring.

Groups whose rings traverse the tile cycle in opposite directions (see
mapping) split the load: with uniform chunk sizes no link inside a tile
is busy more than half of the plan.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError
from .mapping import Mapping
from .topology import DeviceCoord, MeshTopology, transfer_latency

LinkKey = tuple[DeviceCoord, DeviceCoord]

RS = "rs"
AG = "ag"
BORDER = "border"
A2A = "a2a"


@dataclass(frozen=True)
class Transfer:
    src: DeviceCoord
    dst: DeviceCoord
    volume: float  # bytes

    def route(self, topo: MeshTopology):
        return topo.route_xy(self.src, self.dst)

    def latency(self, topo: MeshTopology) -> float:
        route = self.route(topo)
        if not route:
            return 0.0
        bw = min(l.bandwidth for l in route)
        return transfer_latency(self.volume, bw, route[0].link_latency, len(route))


@dataclass(frozen=True)
class PlanPhase:
    transfers: tuple[Transfer, ...]
    stage: str = A2A

    def latency(self, topo: MeshTopology) -> float:
        """Bottleneck-link completion time: the busiest link drains the
        bytes queued on it while the longest route pays the per-hop
        latency once per hop."""
        busy: dict[LinkKey, float] = {}
        max_hops = 0
        lat = 0.0
        for t in self.transfers:
            route = t.route(topo)
            max_hops = max(max_hops, len(route))
            for link in route:
                key = (link.src, link.dst)
                busy[key] = busy.get(key, 0.0) + t.volume / link.bandwidth
                lat = max(lat, link.link_latency)
        if not busy:
            return 0.0
        return max(busy.values()) + lat * max_hops


def phase_latency(phase: PlanPhase, topo: MeshTopology) -> float:
    return phase.latency(topo)


@dataclass(frozen=True)
class CollectivePlan:
    name: str
    phases: tuple[PlanPhase, ...]

    def latency(self, topo: MeshTopology) -> float:
        """Serialized completion time: phases run back to back."""
        return sum(p.latency(topo) for p in self.phases)

    def bottleneck_latency(self, topo: MeshTopology) -> float:
        """Completion time when all transfers stream concurrently.

        The busiest link drains its queued bytes while the longest route
        pays the per-hop latency once.
        """
        busy: dict[LinkKey, float] = {}
        max_hops = 0
        lat = 0.0
        for phase in self.phases:
            for t in phase.transfers:
                route = t.route(topo)
                max_hops = max(max_hops, len(route))
                for link in route:
                    key = (link.src, link.dst)
                    busy[key] = busy.get(key, 0.0) + t.volume / link.bandwidth
                    lat = link.link_latency
        if not busy:
            return 0.0
        return max(busy.values()) + lat * max_hops

    def link_bytes(self, topo: MeshTopology) -> dict[LinkKey, float]:
        out: dict[LinkKey, float] = {}
        for phase in self.phases:
            for t in phase.transfers:
                for link in t.route(topo):
                    key = (link.src, link.dst)
                    out[key] = out.get(key, 0.0) + t.volume
        return out

    def max_hops(self, topo: MeshTopology) -> int:
        return max(
            (len(t.route(topo)) for p in self.phases for t in p.transfers), default=0
        )

    def total_volume(self) -> float:
        return sum(t.volume for p in self.phases for t in p.transfers)

    def reversed(self) -> "CollectivePlan":
        phases = tuple(
            PlanPhase(
                tuple(Transfer(t.dst, t.src, t.volume) for t in p.transfers), p.stage
            )
            for p in self.phases
        )
        return CollectivePlan(self.name + "_rev", phases)

    def conflicts(self, topo: MeshTopology) -> list[tuple[int, LinkKey]]:
        """Directed links claimed twice inside one phase (should be empty)."""
        out = []
        for i, phase in enumerate(self.phases):
            seen: set[LinkKey] = set()
            for t in phase.transfers:
                for link in t.route(topo):
                    key = (link.src, link.dst)
                    if key in seen:
                        out.append((i, key))
                    seen.add(key)
        return out


def _ring_subphases(
    orders: list[tuple[DeviceCoord, ...]], chunk: float, topo: MeshTopology
) -> tuple[list[list[Transfer]], list[list[Transfer]]]:
    """Per-hop sub-phases of a reduce-scatter + all-gather over member rings.

    All rings advance in lockstep: sub-phase j of a step carries hop j of
    every chunk still in flight.  Rings shorter in hops go idle early.
    """
    k = len(orders[0])
    rs: list[list[Transfer]] = []
    ag: list[list[Transfer]] = []
    if k < 2:
        return rs, ag
    for step in range(2 * (k - 1)):
        routes = []
        for order in orders:
            for i, src in enumerate(order):
                routes.append(topo.route_xy(src, order[(i + 1) % k]))
        pitch = max(len(r) for r in routes)
        bucket = rs if step < k - 1 else ag
        for j in range(pitch):
            bucket.append(
                [Transfer(r[j].src, r[j].dst, chunk) for r in routes if len(r) > j]
            )
    return rs, ag


def _assemble(name: str, rs, ag, with_allgather: bool = True) -> CollectivePlan:
    phases = [PlanPhase(tuple(ts), RS) for ts in rs]
    if with_allgather:
        phases += [PlanPhase(tuple(ts), AG) for ts in ag]
    return CollectivePlan(name, tuple(phases))


def plan_ring_allreduce(
    order: tuple[DeviceCoord, ...], volume: float, topo: MeshTopology
) -> CollectivePlan:
    """All-reduce over one ring: k-1 reduce-scatter steps then k-1 gather steps,
    each moving volume/k per member to its ring successor."""
    k = len(order)
    if k < 2:
        return CollectivePlan("ring_allreduce", ())
    rs, ag = _ring_subphases([tuple(order)], volume / k, topo)
    return _assemble("ring_allreduce", rs, ag)


def plan_entwined_allreduce(
    mapping: Mapping, topo: MeshTopology, volume: float, with_allgather: bool = True
) -> CollectivePlan:
    """Simultaneous per-group ring all-reduce using the mapping's ring orders."""
    k = mapping.cfg.tp
    if k < 2:
        return CollectivePlan("entwined_allreduce", ())
    rs, ag = _ring_subphases(list(mapping.members), volume / k, topo)
    return _assemble("entwined_allreduce", rs, ag, with_allgather)


def plan_hier_allreduce(
    mapping: Mapping, topo: MeshTopology, volume: float, with_allgather: bool = True
) -> CollectivePlan:
    """Two-level all-reduce for wafer chains.

    Reduce-scatter runs inside each wafer, partial sums then circulate
    across wafer borders (every phase loads each border with B/P bytes
    per direction, spread over the full-edge links), and an optional
    all-gather restores full activations inside each wafer.
    """
    if not mapping.two_phase_allreduce:
        raise ConfigError("hierarchical all-reduce needs a hier_er mapping")
    wafers = topo.wafer_count
    per_wafer: list[tuple[DeviceCoord, ...]] = []
    for grp in mapping.members:
        for w in range(wafers):
            per_wafer.append(tuple(c for c in grp if c.wafer == w))
    m = len(per_wafer[0])
    chunk = volume / m if m > 1 else volume
    rs, ag = _ring_subphases(per_wafer, chunk, topo) if m > 1 else ([], [])
    phases = [PlanPhase(tuple(ts), RS) for ts in rs]

    wafer_size = topo.width * topo.height
    total = wafer_size * volume / m  # bytes leaving each wafer per direction
    per_link = total / wafers / topo.height
    for _ in range(wafers - 1):
        ts = []
        for w in range(wafers - 1):
            for y in range(topo.height):
                east = DeviceCoord(w, topo.width - 1, y)
                west = DeviceCoord(w + 1, 0, y)
                ts.append(Transfer(east, west, per_link))
                ts.append(Transfer(west, east, per_link))
        phases.append(PlanPhase(tuple(ts), BORDER))
    if with_allgather:
        phases += [PlanPhase(tuple(ts), AG) for ts in ag]
    return CollectivePlan("hier_allreduce", tuple(phases))


def plan_all_to_all(
    mapping: Mapping,
    topo: MeshTopology,
    demands: list[tuple[DeviceCoord, int, float]],
    gathered: bool = True,
    name: str = "all_to_all",
) -> CollectivePlan:
    """Token exchange: each (destination, group, bytes) demand is served
    from group members.

    With gathered activations every member holds the full token set, so
    the demand is served by the member inside the destination's own
    region when one exists (always, for interleaved layouts), falling
    back to the globally nearest member.  Without gathering, tokens stay
    sharded round-robin across members and each ships its share.
    """
    transfers = []
    for dst, group, volume in demands:
        if volume <= 0:
            continue
        members = mapping.members[group]
        if gathered:
            region = set(mapping.regions[mapping.region_of[dst]])
            local = [c for c in members if c in region]
            pool = local if local else members
            src = min(pool, key=lambda c: (topo.manhattan_hops(c, dst), topo.linear_index(c)))
            if src != dst:
                transfers.append(Transfer(src, dst, volume))
        else:
            share = volume / len(members)
            transfers.extend(
                Transfer(src, dst, share) for src in members if src != dst
            )
    return CollectivePlan(name, (PlanPhase(tuple(transfers), A2A),))


@dataclass
class TrafficMatrix:
    """Accumulated bytes per directed link."""

    bytes_per_link: dict[LinkKey, float] = field(default_factory=dict)

    @classmethod
    def from_plans(cls, topo: MeshTopology, *plans: CollectivePlan) -> "TrafficMatrix":
        tm = cls()
        for plan in plans:
            for key, v in plan.link_bytes(topo).items():
                tm.add(key, v)
        return tm

    def add(self, key: LinkKey, volume: float) -> None:
        self.bytes_per_link[key] = self.bytes_per_link.get(key, 0.0) + volume

    def total(self) -> float:
        """Hop-weighted bytes: one count per link crossed."""
        return sum(self.bytes_per_link.values())

    def on(self, key: LinkKey) -> float:
        return self.bytes_per_link.get(key, 0.0)

    def crossing_region_bytes(self, mapping: Mapping) -> float:
        return sum(
            v
            for (src, dst), v in self.bytes_per_link.items()
            if mapping.region_of[src] != mapping.region_of[dst]
        )

    def inter_wafer_bytes(self) -> float:
        return sum(
            v for (src, dst), v in self.bytes_per_link.items() if src.wafer != dst.wafer
        )

    def max_link_bytes(self) -> float:
        return max(self.bytes_per_link.values(), default=0.0)


def link_duty(plan: CollectivePlan, topo: MeshTopology) -> dict[LinkKey, float]:
    """Fraction of the plan's serialized time each directed link is busy."""
    total = plan.latency(topo)
    if total == 0:
        return {}
    busy: dict[LinkKey, float] = {}
    for phase in plan.phases:
        for t in phase.transfers:
            for link in t.route(topo):
                key = (link.src, link.dst)
                busy[key] = busy.get(key, 0.0) + t.volume / link.bandwidth + link.link_latency
    return {k: v / total for k, v in busy.items()}


HOT = "hot"
COLD = "cold"
IDLE = "idle"


@dataclass(frozen=True)
class LinkClass:
    """Per-link {hot, cold, idle} labels for one phase type."""

    classes: dict[LinkKey, str]

    def of(self, key: LinkKey) -> str:
        return self.classes[key]

    def links(self, label: str) -> set[LinkKey]:
        return {k for k, v in self.classes.items() if v == label}

    def usable(self, key: LinkKey) -> bool:
        return self.classes[key] != HOT


def classify_links(
    attention_duty: dict[LinkKey, float],
    moe_duty: dict[LinkKey, float],
    topo: MeshTopology,
    cold_threshold: float = 0.5,
) -> tuple[LinkClass, LinkClass]:
    """Label every mesh link per phase type: idle (no bytes), cold
    (duty at or under the threshold), else hot."""

    def label(duty: dict[LinkKey, float]) -> LinkClass:
        out = {}
        tol = cold_threshold + 1e-12  # absorb float noise at the boundary
        for key in topo.links:
            d = duty.get(key, 0.0)
            out[key] = IDLE if d == 0.0 else COLD if d <= tol else HOT
        return LinkClass(out)

    return label(attention_duty), label(moe_duty)


def complementarity_report(attention: LinkClass, moe: LinkClass) -> dict:
    """Summarize how the two phase types share the mesh; hot/hot overlaps
    are the links where migration can never hide."""
    both_hot = attention.links(HOT) & moe.links(HOT)
    return {
        "attention": {k: len(attention.links(k)) for k in (HOT, COLD, IDLE)},
        "moe": {k: len(moe.links(k)) for k in (HOT, COLD, IDLE)},
        "hot_in_both": sorted(f"{a}->{b}" for a, b in both_hot),
        "complementary": not both_hot,
    }
