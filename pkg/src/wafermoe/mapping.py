"""Device layouts for tensor/data/expert parallelism on a mesh.

Three layouts are provided:

* ``baseline``: each TP group occupies a contiguous rectangular block.
* ``er``: TP groups are interleaved so that every compact tile of the
  mesh holds exactly one member of each group (entwined-ring layout).
  Each tile is then a self-sufficient token domain and per-group
  all-reduce rings entwine across tiles.
* ``hier_er``: per-wafer entwined layout for multi-wafer chains; each
  wafer acts as one unified token domain and the all-reduce runs in two
  phases (intra-wafer, then across wafer borders).

A token domain is the minimal set of devices that together hold the
tokens of every TP group.  Expert partitions are assigned to devices in
region-major order.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .errors import ConfigError
from .topology import DeviceCoord, MeshTopology

SUPPORTED_TP = (1, 4, 8, 16)

BASELINE = "baseline"
ER = "er"
HIER_ER = "hier_er"
LAYOUTS = (BASELINE, ER, HIER_ER)


@dataclass(frozen=True)
class ParallelismConfig:
    dp: int
    tp: int
    ep: int
    tokens_per_tp_group: int = 256

    @classmethod
    def derive(cls, topo: MeshTopology, tp: int, tokens_per_tp_group: int = 256) -> "ParallelismConfig":
        n = topo.device_count
        errors = []
        if tp not in SUPPORTED_TP:
            errors.append(f"tp={tp} unsupported; supported tp values: {SUPPORTED_TP}")
        elif n % tp != 0:
            errors.append(f"tp={tp} does not divide device count {n}")
        if tokens_per_tp_group < 1:
            errors.append(f"tokens_per_tp_group must be >= 1, got {tokens_per_tp_group}")
        if tp != 1 and (topo.width != topo.height or not 4 <= topo.width <= 8):
            errors.append(
                f"tp={tp} requires a square wafer between 4x4 and 8x8, got "
                f"{topo.width}x{topo.height}"
            )
        if errors:
            raise ConfigError(errors)
        return cls(dp=n // tp, tp=tp, ep=n, tokens_per_tp_group=tokens_per_tp_group)

    def validate_for(self, topo: MeshTopology) -> None:
        n = topo.device_count
        errors = []
        if self.dp * self.tp != n:
            errors.append(f"dp*tp must equal device count: {self.dp}*{self.tp} != {n}")
        if self.ep != n:
            errors.append(f"ep must equal device count: {self.ep} != {n}")
        if self.tokens_per_tp_group < 1:
            errors.append("tokens_per_tp_group must be >= 1")
        if errors:
            raise ConfigError(errors)


@dataclass(frozen=True)
class Mapping:
    layout: str
    cfg: ParallelismConfig
    group_of: dict[DeviceCoord, int]
    rank_of: dict[DeviceCoord, int]
    members: tuple[tuple[DeviceCoord, ...], ...]  # per group, in ring order
    regions: tuple[tuple[DeviceCoord, ...], ...]  # disjoint rectangular tiles
    region_of: dict[DeviceCoord, int]
    device_order: tuple[DeviceCoord, ...]  # region-major expert assignment order
    native_experts: dict[DeviceCoord, tuple[int, ...]]
    shadow_slots: int = 1
    two_phase_allreduce: bool = False

    @property
    def n_experts(self) -> int:
        return sum(len(v) for v in self.native_experts.values())


@dataclass(frozen=True)
class TokenDomain:
    """Minimal device set holding every TP group's tokens, plus its home region."""

    members: tuple[DeviceCoord, ...]
    region: tuple[DeviceCoord, ...]
    anchor: DeviceCoord

    def hull(self) -> frozenset[DeviceCoord]:
        """Devices inside the per-wafer bounding rectangles of the members."""
        out: set[DeviceCoord] = set()
        for w in {m.wafer for m in self.members}:
            pts = [m for m in self.members if m.wafer == w]
            x0, x1 = min(p.x for p in pts), max(p.x for p in pts)
            y0, y1 = min(p.y for p in pts), max(p.y for p in pts)
            for x in range(x0, x1 + 1):
                for y in range(y0, y1 + 1):
                    out.add(DeviceCoord(w, x, y))
        return frozenset(out)


def _tile_shape(size: int, width: int, height: int, what: str) -> tuple[int, int]:
    # most-square factorization that tiles the wafer; prefer taller on ties
    best: tuple[int, int] | None = None
    for dw in range(1, size + 1):
        if size % dw:
            continue
        dh = size // dw
        if width % dw or height % dh:
            continue
        if best is None or abs(dh - dw) < abs(best[1] - best[0]) or (
            abs(dh - dw) == abs(best[1] - best[0]) and dh > best[1]
        ):
            best = (dw, dh)
    if best is None:
        raise ConfigError(
            f"no rectangular {what} of {size} devices tiles a {width}x{height} wafer"
        )
    return best


def _grid_cycle(gw: int, gh: int) -> list[tuple[int, int]]:
    """Hamiltonian cycle over a gw x gh grid (needs one even dimension or 2 cells)."""
    if gw * gh == 1:
        return [(0, 0)]
    if gw * gh == 2:
        return [(0, 0), (1, 0)] if gw == 2 else [(0, 0), (0, 1)]
    if gh % 2 == 0 and gw >= 2:
        cyc = [(x, 0) for x in range(gw)]
        for y in range(1, gh):
            xs = range(gw - 1, 0, -1) if y % 2 == 1 else range(1, gw)
            cyc.extend((x, y) for x in xs)
        cyc.extend((0, y) for y in range(gh - 1, 0, -1))
        return cyc
    if gw % 2 == 0 and gh >= 2:
        return [(x, y) for (y, x) in _grid_cycle(gh, gw)]
    raise ConfigError(f"no ring order exists for a {gw}x{gh} tile grid")


def _rect_devices(wafer: int, x0: int, y0: int, dw: int, dh: int) -> tuple[DeviceCoord, ...]:
    return tuple(
        DeviceCoord(wafer, x0 + dx, y0 + dy) for dy in range(dh) for dx in range(dw)
    )


def _assign_experts(order: tuple[DeviceCoord, ...], n_experts: int) -> dict[DeviceCoord, tuple[int, ...]]:
    if n_experts == 0:
        return {c: () for c in order}
    n = len(order)
    if n_experts % n != 0:
        raise ConfigError(f"{n_experts} experts do not divide evenly over {n} devices")
    per = n_experts // n
    return {c: tuple(range(i * per, (i + 1) * per)) for i, c in enumerate(order)}


def baseline_mapping(
    topo: MeshTopology,
    cfg: ParallelismConfig,
    n_experts: int = 0,
    shadow_slots: int = 1,
) -> Mapping:
    """Contiguous rectangular TP blocks, one expert partition per device."""
    cfg.validate_for(topo)
    w, h = topo.width, topo.height
    bw, bh = _tile_shape(cfg.tp, w, h, "TP block")
    nbx, nby = w // bw, h // bh
    group_of: dict[DeviceCoord, int] = {}
    rank_of: dict[DeviceCoord, int] = {}
    members: list[tuple[DeviceCoord, ...]] = []
    regions: list[tuple[DeviceCoord, ...]] = []
    ring = _grid_cycle(bw, bh)
    for wafer in range(topo.wafer_count):
        for bx in range(nbx):  # column-major block ids
            for by in range(nby):
                g = len(members)
                order = tuple(
                    DeviceCoord(wafer, bx * bw + dx, by * bh + dy) for (dx, dy) in ring
                )
                for r, c in enumerate(order):
                    group_of[c] = g
                    rank_of[c] = r
                members.append(order)
                regions.append(_rect_devices(wafer, bx * bw, by * bh, bw, bh))
    device_order = tuple(itertools.chain.from_iterable(regions))
    region_of = {c: i for i, reg in enumerate(regions) for c in reg}
    return Mapping(
        layout=BASELINE,
        cfg=cfg,
        group_of=group_of,
        rank_of=rank_of,
        members=tuple(members),
        regions=tuple(regions),
        region_of=region_of,
        device_order=device_order,
        native_experts=_assign_experts(device_order, n_experts),
        shadow_slots=shadow_slots,
    )


def er_mapping(
    topo: MeshTopology,
    cfg: ParallelismConfig,
    n_experts: int = 0,
    shadow_slots: int = 1,
) -> Mapping:
    """Interleave TP groups so each tile holds one member of every group.

    Tiles have cfg.dp devices; the member of group g sits at the same
    in-tile offset in every tile.  Each group's ring visits the tiles
    along one Hamiltonian cycle of the tile grid; groups at odd in-tile
    offset parity traverse it in reverse so that ring transfers never
    pile onto the same in-tile link.
    """
    cfg.validate_for(topo)
    if cfg.tp == 1:
        m = baseline_mapping(topo, cfg, n_experts, shadow_slots)
        return Mapping(
            layout=ER,
            cfg=cfg,
            group_of=m.group_of,
            rank_of=m.rank_of,
            members=m.members,
            regions=m.regions,
            region_of=m.region_of,
            device_order=m.device_order,
            native_experts=m.native_experts,
            shadow_slots=shadow_slots,
        )
    if topo.wafer_count != 1:
        raise ConfigError("er layout is single-wafer; use hier_er for wafer chains")
    w, h = topo.width, topo.height
    dw, dh = _tile_shape(cfg.dp, w, h, "token-domain tile")
    gw, gh = w // dw, h // dh  # tile grid; one tile per group member
    cycle = _grid_cycle(gw, gh)
    tiles = {
        (tx, ty): _rect_devices(0, tx * dw, ty * dh, dw, dh)
        for ty in range(gh)
        for tx in range(gw)
    }
    group_of: dict[DeviceCoord, int] = {}
    rank_of: dict[DeviceCoord, int] = {}
    members: list[tuple[DeviceCoord, ...]] = []
    for dx in range(dw):  # column-major group ids by in-tile offset
        for dy in range(dh):
            g = len(members)
            order = [DeviceCoord(0, tx * dw + dx, ty * dh + dy) for (tx, ty) in cycle]
            if (dx + dy) % 2 == 1:
                order = [order[0]] + order[:0:-1]  # reversed cycle direction
            for r, c in enumerate(order):
                group_of[c] = g
                rank_of[c] = r
            members.append(tuple(order))
    regions = tuple(tiles[(tx, ty)] for ty in range(gh) for tx in range(gw))
    region_of = {c: i for i, reg in enumerate(regions) for c in reg}
    device_order = tuple(itertools.chain.from_iterable(regions))
    return Mapping(
        layout=ER,
        cfg=cfg,
        group_of=group_of,
        rank_of=rank_of,
        members=tuple(members),
        regions=regions,
        region_of=region_of,
        device_order=device_order,
        native_experts=_assign_experts(device_order, n_experts),
        shadow_slots=shadow_slots,
    )


def hier_er_mapping(
    topo: MeshTopology,
    cfg: ParallelismConfig,
    n_experts: int = 0,
    shadow_slots: int = 1,
) -> Mapping:
    """Per-wafer entwined layout; each TP group spans all wafers.

    Group g occupies the same in-tile offset on every wafer, so ranks
    order members wafer-by-wafer.  The matching all-reduce runs
    reduce-scatter inside each wafer, then an all-gather across borders.
    """
    cfg.validate_for(topo)
    if topo.wafer_count < 2:
        raise ConfigError("hier_er requires wafer_count >= 2; use er on a single wafer")
    if cfg.tp % topo.wafer_count != 0:
        raise ConfigError(
            f"tp={cfg.tp} must divide evenly across {topo.wafer_count} wafers"
        )
    w, h = topo.width, topo.height
    wafer_size = w * h
    if wafer_size % cfg.dp != 0:
        raise ConfigError(f"dp={cfg.dp} does not divide wafer size {wafer_size}")
    dw, dh = _tile_shape(cfg.dp, w, h, "token-domain tile")
    gw, gh = w // dw, h // dh
    cycle = _grid_cycle(gw, gh)
    group_of: dict[DeviceCoord, int] = {}
    rank_of: dict[DeviceCoord, int] = {}
    members: list[tuple[DeviceCoord, ...]] = []
    for dx in range(dw):
        for dy in range(dh):
            g = len(members)
            order: list[DeviceCoord] = []
            for wafer in range(topo.wafer_count):
                per = [
                    DeviceCoord(wafer, tx * dw + dx, ty * dh + dy) for (tx, ty) in cycle
                ]
                if (dx + dy) % 2 == 1:
                    per = [per[0]] + per[:0:-1]
                order.extend(per)
            for r, c in enumerate(order):
                group_of[c] = g
                rank_of[c] = r
            members.append(tuple(order))
    # one region per wafer: the whole wafer acts as a unified token domain
    regions = tuple(
        tuple(DeviceCoord(wafer, x, y) for y in range(h) for x in range(w))
        for wafer in range(topo.wafer_count)
    )
    region_of = {c: i for i, reg in enumerate(regions) for c in reg}
    device_order = tuple(itertools.chain.from_iterable(regions))
    return Mapping(
        layout=HIER_ER,
        cfg=cfg,
        group_of=group_of,
        rank_of=rank_of,
        members=tuple(members),
        regions=regions,
        region_of=region_of,
        device_order=device_order,
        native_experts=_assign_experts(device_order, n_experts),
        shadow_slots=shadow_slots,
        two_phase_allreduce=True,
    )


def make_mapping(layout: str, topo: MeshTopology, cfg: ParallelismConfig, **kw) -> Mapping:
    if layout == BASELINE:
        return baseline_mapping(topo, cfg, **kw)
    if layout == ER:
        return er_mapping(topo, cfg, **kw)
    if layout == HIER_ER:
        return hier_er_mapping(topo, cfg, **kw)
    raise ConfigError(f"unknown layout {layout!r}; choose one of {LAYOUTS}")


def _farthest_corner(region: tuple[DeviceCoord, ...], topo: MeshTopology) -> DeviceCoord:
    # rectangle corner farthest from the wafer center; ties to smallest (x, y)
    wafer = region[0].wafer
    x0, x1 = min(c.x for c in region), max(c.x for c in region)
    y0, y1 = min(c.y for c in region), max(c.y for c in region)
    cx, cy = (topo.width - 1) / 2, (topo.height - 1) / 2
    corners = [DeviceCoord(wafer, x, y) for x in (x0, x1) for y in (y0, y1)]
    return max(corners, key=lambda c: (abs(c.x - cx) + abs(c.y - cy), -c.x, -c.y))


def compute_ftds(mapping: Mapping, topo: MeshTopology) -> tuple[TokenDomain, ...]:
    """Extract one token domain per region.

    For interleaved layouts every region already holds one member of
    each group, so the region is its own (minimal) domain.  For the
    baseline the domain anchored at a block's outermost corner collects
    the nearest member of every TP group; ties break toward the
    smallest coordinate.
    """
    if mapping.cfg.tp == 1:
        return tuple(
            TokenDomain(members=(c,), region=(c,), anchor=c) for c in mapping.device_order
        )
    if mapping.layout in (ER, HIER_ER):
        return tuple(
            TokenDomain(members=reg, region=reg, anchor=_farthest_corner(reg, topo))
            for reg in mapping.regions
        )
    domains = []
    for reg in mapping.regions:
        anchor = _farthest_corner(reg, topo)
        picked = []
        for grp in mapping.members:
            picked.append(
                min(grp, key=lambda c: (topo.manhattan_hops(anchor, c), c.wafer, c.x, c.y))
            )
        domains.append(TokenDomain(members=tuple(picked), region=reg, anchor=anchor))
    return tuple(domains)


def avg_hops(ftds: tuple[TokenDomain, ...], topo: MeshTopology) -> float:
    """Mean fetch distance inside domains with uniform 1/(k-1) peer weights."""
    per_member: list[float] = []
    for dom in ftds:
        k = len(dom.members)
        if k < 2:
            per_member.extend(0.0 for _ in dom.members)
            continue
        for m in dom.members:
            total = sum(topo.manhattan_hops(m, o) for o in dom.members if o != m)
            per_member.append(total / (k - 1))
    if not per_member:
        raise ValueError("avg_hops needs at least one domain")
    return sum(per_member) / len(per_member)


@dataclass(frozen=True)
class OverlapReport:
    shared_devices: tuple[DeviceCoord, ...]  # inside every domain's hull
    shared_link_count: int  # directed mesh links between shared devices
    pair_overlap_counts: dict[tuple[int, int], int] = field(default_factory=dict)


def ftd_intersections(ftds: tuple[TokenDomain, ...]) -> OverlapReport:
    """Report the device set where all domain hulls overlap."""
    if len(ftds) < 2:
        return OverlapReport((), 0, {})
    hulls = [dom.hull() for dom in ftds]
    shared = frozenset.intersection(*hulls)
    pair_counts = {
        (i, j): len(hulls[i] & hulls[j])
        for i in range(len(hulls))
        for j in range(i + 1, len(hulls))
        if hulls[i] & hulls[j]
    }
    links = 0
    for a in shared:
        for b in shared:
            if a.wafer == b.wafer and abs(a.x - b.x) + abs(a.y - b.y) == 1:
                links += 1
    ordered = tuple(sorted(shared))
    return OverlapReport(ordered, links, pair_counts)


def render_ascii(mapping: Mapping, topo: MeshTopology) -> str:
    """Grid view of TP group ids (one wafer per paragraph)."""
    out = []
    width = max(2, len(str(len(mapping.members) - 1)))
    for wafer in range(topo.wafer_count):
        out.append(f"wafer {wafer}:")
        for y in range(topo.height):
            row = [
                f"{mapping.group_of[DeviceCoord(wafer, x, y)]:>{width}}"
                for x in range(topo.width)
            ]
            out.append("  " + " ".join(row))
    return "\n".join(out)
