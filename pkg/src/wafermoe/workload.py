"""Model descriptions and synthetic expert-routing workloads.

Token routing is sampled with a Gumbel top-k trick over a per-layer
expert popularity distribution, so identical seeds reproduce identical
token counts.  Popularity can drift between iterations to exercise the
load balancer.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .topology import DeviceCoord


@dataclass(frozen=True)
class ModelSpec:
    name: str
    total_params: float
    n_layers: int
    moe_layers: int
    n_experts: int
    top_k: int
    expert_bytes: float  # per-expert weight footprint, 1 byte per parameter
    hidden_dim: int

    @property
    def dense_layers(self) -> int:
        return self.n_layers - self.moe_layers


MODEL_PRESETS: dict[str, ModelSpec] = {
    "deepseek_v3": ModelSpec("deepseek_v3", 671e9, 61, 58, 256, 8, 42e6, 7168),
    "qwen3": ModelSpec("qwen3", 235e9, 94, 94, 128, 8, 18e6, 4096),
    "deepseek_v2": ModelSpec("deepseek_v2", 236e9, 60, 59, 160, 6, 23e6, 5120),
    "dbrx": ModelSpec("dbrx", 132e9, 40, 40, 16, 4, 189e6, 6144),
    "mixtral_8x22b": ModelSpec("mixtral_8x22b", 141e9, 56, 56, 8, 2, 288e6, 6144),
}


def get_preset(name: str) -> ModelSpec:
    try:
        return MODEL_PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown model preset {name!r}; available: {sorted(MODEL_PRESETS)}"
        ) from None


@dataclass(frozen=True)
class GatingModel:
    popularity: np.ndarray  # (moe_layers, n_experts), rows sum to 1
    seed: int = 0
    drift: float = 0.0  # fraction of popularity redrawn per iteration

    @property
    def n_experts(self) -> int:
        return self.popularity.shape[1]

    @property
    def n_layers(self) -> int:
        return self.popularity.shape[0]


def make_gating(
    n_experts: int,
    n_layers: int,
    dist: str = "zipf",
    alpha: float = 1.0,
    seed: int = 0,
    drift: float = 0.0,
) -> GatingModel:
    """Build per-layer popularity; zipf ranks are permuted independently
    per layer so hot experts land on different devices per layer."""
    if n_experts < 1 or n_layers < 1:
        raise ConfigError("gating needs n_experts >= 1 and n_layers >= 1")
    if dist == "uniform":
        pop = np.full((n_layers, n_experts), 1.0 / n_experts)
    elif dist == "zipf":
        rng = np.random.default_rng(seed)
        base = 1.0 / np.arange(1, n_experts + 1) ** alpha
        base /= base.sum()
        rows = [base[rng.permutation(n_experts)] for _ in range(n_layers)]
        pop = np.stack(rows)
    else:
        raise ConfigError(f"unknown gating dist {dist!r}; use 'zipf' or 'uniform'")
    return GatingModel(popularity=pop, seed=seed, drift=drift)


def evolve_popularity(gating: GatingModel, iteration: int) -> GatingModel:
    """Blend in a freshly drawn distribution: pop <- (1-d)*pop + d*fresh."""
    if gating.drift <= 0.0:
        return gating
    rng = np.random.default_rng([gating.seed, 104729, iteration])
    fresh = rng.dirichlet(np.ones(gating.n_experts), size=gating.n_layers)
    pop = (1.0 - gating.drift) * gating.popularity + gating.drift * fresh
    pop = pop / pop.sum(axis=1, keepdims=True)
    return replace(gating, popularity=pop)


def gate_tokens(
    gating: GatingModel, layer: int, iteration: int, n_tokens: int, top_k: int
) -> np.ndarray:
    """Route n_tokens to their top_k experts; returns per-expert counts."""
    if top_k > gating.n_experts:
        raise ConfigError(f"top_k={top_k} exceeds {gating.n_experts} experts")
    rng = np.random.default_rng([gating.seed, iteration, layer])
    logits = np.log(np.maximum(gating.popularity[layer], 1e-300))
    scores = logits + rng.gumbel(size=(n_tokens, gating.n_experts))
    picked = np.argpartition(scores, -top_k, axis=1)[:, -top_k:]
    return np.bincount(picked.ravel(), minlength=gating.n_experts)


def iteration_counts(
    gating: GatingModel, iteration: int, n_tokens: int, top_k: int
) -> np.ndarray:
    """Per-layer expert token counts for one iteration, shape (L, E)."""
    return np.stack(
        [
            gate_tokens(gating, layer, iteration, n_tokens, top_k)
            for layer in range(gating.n_layers)
        ]
    )


def device_loads(
    counts: np.ndarray, hosts: dict[int, tuple[DeviceCoord, ...]]
) -> dict[DeviceCoord, float]:
    """Spread each expert's tokens evenly over the devices hosting it."""
    loads: dict[DeviceCoord, float] = {}
    for expert, devs in hosts.items():
        if not devs:
            raise ConfigError(f"expert {expert} has no hosting device")
        share = float(counts[expert]) / len(devs)
        for d in devs:
            loads[d] = loads.get(d, 0.0) + share
    return loads


TRACE_FIELDS = ("iteration", "layer", "expert", "tokens")


def trace_to_csv(rows: list[tuple[int, int, int, int]], stream: io.TextIOBase) -> None:
    writer = csv.writer(stream)
    writer.writerow(TRACE_FIELDS)
    for row in rows:
        writer.writerow(row)


def trace_from_csv(stream: io.TextIOBase) -> list[tuple[int, int, int, int]]:
    reader = csv.reader(stream)
    header = next(reader, None)
    if header != list(TRACE_FIELDS):
        raise ConfigError(f"bad trace header {header!r}; expected {list(TRACE_FIELDS)}")
    return [tuple(int(v) for v in row) for row in reader if row]
