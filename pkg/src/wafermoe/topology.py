"""Wafer-scale 2D mesh topology.

Devices sit on a rectangular grid per wafer; wafers form a 1D chain.
Adjacent wafers are joined along their full shared edge: the last
column of wafer w is wired pairwise (by row) to the first column of
wafer w+1.  All links are full duplex and modeled as two directed
links with identical bandwidth and latency.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

from .errors import ConfigError

# Default per-hop propagation/serialization constant in seconds.
# Not calibrated against hardware; override per deployment.
DEFAULT_LINK_LATENCY = 0.2e-6

INTRA_WAFER = "intra_wafer"
INTER_WAFER = "inter_wafer"


class DeviceCoord(NamedTuple):
    wafer: int
    x: int
    y: int

    def __str__(self) -> str:
        return f"w{self.wafer}d{self.x},{self.y}"


@dataclass(frozen=True)
class Link:
    src: DeviceCoord
    dst: DeviceCoord
    kind: str  # INTRA_WAFER or INTER_WAFER
    bandwidth: float  # bytes/s
    link_latency: float  # s


@dataclass(frozen=True)
class DeviceParams:
    compute_flops: float = 2250e12  # peak FP16 FLOP/s
    mem_bandwidth: float = 8e12  # bytes/s
    mem_capacity: float = 180e9  # bytes


@dataclass
class MeshTopology:
    wafer_count: int
    width: int
    height: int
    links: dict[tuple[DeviceCoord, DeviceCoord], Link]
    device: DeviceParams = field(default_factory=DeviceParams)

    @property
    def device_count(self) -> int:
        return self.wafer_count * self.width * self.height

    def devices(self) -> Iterator[DeviceCoord]:
        for w in range(self.wafer_count):
            for y in range(self.height):
                for x in range(self.width):
                    yield DeviceCoord(w, x, y)

    def contains(self, c: DeviceCoord) -> bool:
        return (
            0 <= c.wafer < self.wafer_count
            and 0 <= c.x < self.width
            and 0 <= c.y < self.height
        )

    def link(self, src: DeviceCoord, dst: DeviceCoord) -> Link:
        try:
            return self.links[(src, dst)]
        except KeyError:
            raise ConfigError(f"no link {src} -> {dst}") from None

    def neighbors(self, c: DeviceCoord) -> list[DeviceCoord]:
        return self._neighbors[c]

    def __post_init__(self) -> None:
        self._neighbors: dict[DeviceCoord, list[DeviceCoord]] = {
            c: [] for c in self.devices()
        }
        for (src, dst) in self.links:
            self._neighbors[src].append(dst)
        self._route_cache: dict[tuple[DeviceCoord, DeviceCoord], tuple[Link, ...]] = {}

    def linear_index(self, c: DeviceCoord) -> int:
        return (c.wafer * self.height + c.y) * self.width + c.x

    def manhattan_hops(self, a: DeviceCoord, b: DeviceCoord) -> int:
        """Hop distance under XY routing with border crossings at the source row."""
        for c in (a, b):
            if not self.contains(c):
                raise ConfigError(f"coordinate {c} outside topology")
        if a.wafer == b.wafer:
            return abs(a.x - b.x) + abs(a.y - b.y)
        # Cross each wafer boundary at the source row, then route XY in the
        # destination wafer.  One hop per boundary crossed.
        crossings = abs(a.wafer - b.wafer)
        if b.wafer > a.wafer:
            exit_hops = self.width - 1 - a.x  # to the east border column
            entry_x = 0
            through = (crossings - 1) * (self.width - 1)
        else:
            exit_hops = a.x  # to the west border column
            entry_x = self.width - 1
            through = (crossings - 1) * (self.width - 1)
        return exit_hops + crossings + through + abs(entry_x - b.x) + abs(a.y - b.y)

    def route_xy(self, a: DeviceCoord, b: DeviceCoord) -> tuple[Link, ...]:
        """Deterministic X-before-Y minimal route; crosses wafers at the source row."""
        key = (a, b)
        cached = self._route_cache.get(key)
        if cached is not None:
            return cached
        for c in (a, b):
            if not self.contains(c):
                raise ConfigError(f"coordinate {c} outside topology")
        path: list[Link] = []
        cur = a
        while cur.wafer != b.wafer:
            step = 1 if b.wafer > cur.wafer else -1
            border_x = self.width - 1 if step == 1 else 0
            while cur.x != border_x:
                nxt = DeviceCoord(cur.wafer, cur.x + (1 if border_x > cur.x else -1), cur.y)
                path.append(self.link(cur, nxt))
                cur = nxt
            nxt = DeviceCoord(cur.wafer + step, 0 if step == 1 else self.width - 1, cur.y)
            path.append(self.link(cur, nxt))
            cur = nxt
        while cur.x != b.x:
            nxt = DeviceCoord(cur.wafer, cur.x + (1 if b.x > cur.x else -1), cur.y)
            path.append(self.link(cur, nxt))
            cur = nxt
        while cur.y != b.y:
            nxt = DeviceCoord(cur.wafer, cur.x, cur.y + (1 if b.y > cur.y else -1))
            path.append(self.link(cur, nxt))
            cur = nxt
        route = tuple(path)
        self._route_cache[key] = route
        return route


def build_mesh(
    wafer_count: int,
    width: int,
    height: int,
    intra_bandwidth: float = 8e12,
    inter_bandwidth: float = 9e12,
    link_latency: float = DEFAULT_LINK_LATENCY,
    device: DeviceParams | None = None,
) -> MeshTopology:
    """Construct a chain of wafer_count rectangular meshes with border links."""
    errors = []
    if wafer_count < 1:
        errors.append(f"wafer_count must be >= 1, got {wafer_count}")
    if width < 1 or height < 1:
        errors.append(f"mesh dimensions must be >= 1, got {width}x{height}")
    if intra_bandwidth <= 0 or inter_bandwidth <= 0:
        errors.append("link bandwidths must be positive")
    if link_latency < 0:
        errors.append("link latency must be non-negative")
    if errors:
        raise ConfigError(errors)

    links: dict[tuple[DeviceCoord, DeviceCoord], Link] = {}

    def add_pair(a: DeviceCoord, b: DeviceCoord, kind: str, bw: float) -> None:
        links[(a, b)] = Link(a, b, kind, bw, link_latency)
        links[(b, a)] = Link(b, a, kind, bw, link_latency)

    for w in range(wafer_count):
        for y in range(height):
            for x in range(width):
                c = DeviceCoord(w, x, y)
                if x + 1 < width:
                    add_pair(c, DeviceCoord(w, x + 1, y), INTRA_WAFER, intra_bandwidth)
                if y + 1 < height:
                    add_pair(c, DeviceCoord(w, x, y + 1), INTRA_WAFER, intra_bandwidth)
        if w + 1 < wafer_count:
            for y in range(height):
                add_pair(
                    DeviceCoord(w, width - 1, y),
                    DeviceCoord(w + 1, 0, y),
                    INTER_WAFER,
                    inter_bandwidth,
                )
    return MeshTopology(wafer_count, width, height, links, device or DeviceParams())


def transfer_latency(volume: float, bandwidth: float, link_latency: float, hops: int) -> float:
    """Time to move volume bytes across hops equal-bandwidth links.

    Each hop contributes serialization (volume/bandwidth) plus the fixed
    per-link constant: (volume/bandwidth + link_latency) * hops.
    """
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    if volume < 0:
        raise ValueError(f"volume must be non-negative, got {volume}")
    if link_latency < 0:
        raise ValueError(f"link_latency must be non-negative, got {link_latency}")
    if hops < 0:
        raise ValueError(f"hops must be non-negative, got {hops}")
    return (volume / bandwidth + link_latency) * hops


def to_adjacency_json(topo: MeshTopology) -> dict:
    """JSON-serializable adjacency dump for debugging."""
    return {
        "wafer_count": topo.wafer_count,
        "width": topo.width,
        "height": topo.height,
        "devices": [str(c) for c in topo.devices()],
        "links": [
            {
                "src": str(l.src),
                "dst": str(l.dst),
                "kind": l.kind,
                "bandwidth": l.bandwidth,
                "link_latency": l.link_latency,
            }
            for l in topo.links.values()
        ],
    }
