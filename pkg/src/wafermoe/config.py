"""Experiment configuration: parsing, validation, and scenario assembly.

Configs are TOML (JSON is accepted as an alternative) with nested blocks
for topology, model, parallelism, balancer, workload, compute, and
output.  Validation collects every problem before reporting so a config
can be fixed in one pass.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10 runtime
    import tomli as tomllib

from .engine import ComputeModel, SimulationSettings
from .errors import ConfigError
from .mapping import ER, HIER_ER, LAYOUTS, Mapping, ParallelismConfig, make_mapping
from .topology import MeshTopology, build_mesh
from .workload import (
    MODEL_PRESETS,
    GatingModel,
    ModelSpec,
    get_preset,
    make_gating,
)
from .balancer import MODE_OFF, MODES

_MODEL_FIELDS = (
    "name",
    "total_params",
    "n_layers",
    "moe_layers",
    "n_experts",
    "top_k",
    "expert_bytes",
    "hidden_dim",
)


@dataclass
class SimConfig:
    """Validated experiment description; build_scenario turns it into
    live simulator objects."""

    # topology
    wafers: int = 1
    width: int = 4
    height: int = 4
    intra_bandwidth: float = 8e12
    inter_bandwidth: float = 9e12
    link_latency: float = 0.2e-6
    # model
    model: ModelSpec = field(default_factory=lambda: get_preset("qwen3"))
    # parallelism
    tp: int = 4
    dp: int | None = None
    tokens: int = 256
    micro_batches: int = 1
    with_allgather: bool = True
    mapping: str = ER
    # balancer
    balancer_mode: str = MODE_OFF
    alpha: float | None = None
    beta: float | None = None
    slots: int = 1
    window: int = 16
    cold_threshold: float = 0.5
    # workload
    dist: str = "zipf"
    zipf_exponent: float = 1.0
    drift: float = 0.0
    seed: int = 0
    popularity: list | None = None  # explicit per-layer scenario vectors
    # compute
    compute: ComputeModel = field(default_factory=ComputeModel)
    # output
    out_dir: str = "out"
    label: str = ""

    def settings(self) -> SimulationSettings:
        return SimulationSettings(
            micro_batches=self.micro_batches,
            with_allgather=self.with_allgather,
            balancer_mode=self.balancer_mode,
            alpha=self.alpha,
            beta=self.beta,
            shadow_slots=self.slots,
            ema_window=self.window,
            cold_threshold=self.cold_threshold,
        )


def _take(block: dict, key: str, kinds, errs: list, where: str, default=None):
    if key not in block:
        return default
    value = block.pop(key)
    if kinds is bool:
        if not isinstance(value, bool):
            errs.append(f"{where}.{key}: expected a boolean, got {value!r}")
            return default
        return value
    if kinds is int:
        if isinstance(value, bool) or not isinstance(value, int):
            errs.append(f"{where}.{key}: expected an integer, got {value!r}")
            return default
        return value
    if kinds is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errs.append(f"{where}.{key}: expected a number, got {value!r}")
            return default
        return float(value)
    if kinds is str:
        if not isinstance(value, str):
            errs.append(f"{where}.{key}: expected a string, got {value!r}")
            return default
        return value
    return value


def _warn_unknown(block: dict, where: str, errs: list) -> None:
    for key in block:
        errs.append(f"{where}.{key}: unknown key")


def load_raw(path: str | Path) -> dict:
    """Read a TOML or JSON config file into a plain dict."""
    p = Path(path)
    data = p.read_bytes()
    if p.suffix.lower() == ".json":
        return json.loads(data.decode())
    try:
        return tomllib.loads(data.decode())
    except tomllib.TOMLDecodeError as exc:
        if p.suffix.lower() in ("", ".toml"):
            raise ConfigError(f"{p}: invalid TOML: {exc}") from exc
        try:
            return json.loads(data.decode())
        except json.JSONDecodeError:
            raise ConfigError(f"{p}: neither valid TOML nor JSON") from exc


def parse_config(path: str | Path) -> SimConfig:
    """Parse and fully validate a config file; every validation problem
    is reported, not just the first."""
    raw = load_raw(path)
    return parse_config_dict(raw, source=str(path))


def parse_config_dict(raw: dict, source: str = "<config>") -> SimConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a table/object")
    raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
    errs: list[str] = []
    cfg = SimConfig()

    topo = raw.pop("topology", {})
    if not isinstance(topo, dict):
        errs.append("topology: must be a table")
        topo = {}
    cfg.wafers = _take(topo, "wafers", int, errs, "topology", cfg.wafers)
    cfg.width = _take(topo, "width", int, errs, "topology", cfg.width)
    cfg.height = _take(topo, "height", int, errs, "topology", cfg.height)
    cfg.intra_bandwidth = _take(
        topo, "intra_bandwidth", float, errs, "topology", cfg.intra_bandwidth
    )
    cfg.inter_bandwidth = _take(
        topo, "inter_bandwidth", float, errs, "topology", cfg.inter_bandwidth
    )
    cfg.link_latency = _take(topo, "link_latency", float, errs, "topology", cfg.link_latency)
    _warn_unknown(topo, "topology", errs)
    for name in ("wafers", "width", "height"):
        if getattr(cfg, name) < 1:
            errs.append(f"topology.{name}: must be >= 1")
    for name in ("intra_bandwidth", "inter_bandwidth"):
        if getattr(cfg, name) <= 0:
            errs.append(f"topology.{name}: must be positive")
    if cfg.link_latency < 0:
        errs.append("topology.link_latency: must be >= 0")

    model = raw.pop("model", {})
    if not isinstance(model, dict):
        errs.append("model: must be a table")
        model = {}
    preset = _take(model, "preset", str, errs, "model")
    explicit = {k: model.pop(k) for k in list(model) if k in _MODEL_FIELDS}
    _warn_unknown(model, "model", errs)
    if preset is not None and explicit:
        errs.append("model: give either a preset or explicit fields, not both")
    elif preset is not None:
        try:
            cfg.model = get_preset(preset)
        except ConfigError as exc:
            errs.extend(exc.messages)
    elif explicit:
        missing = [k for k in _MODEL_FIELDS if k not in explicit]
        if missing:
            errs.append(f"model: explicit spec missing fields: {', '.join(missing)}")
        else:
            try:
                cfg.model = ModelSpec(**explicit)
            except (TypeError, ConfigError) as exc:
                errs.append(f"model: {exc}")

    par = raw.pop("parallelism", {})
    if not isinstance(par, dict):
        errs.append("parallelism: must be a table")
        par = {}
    cfg.tp = _take(par, "tp", int, errs, "parallelism", cfg.tp)
    cfg.dp = _take(par, "dp", int, errs, "parallelism", cfg.dp)
    cfg.tokens = _take(par, "tokens", int, errs, "parallelism", cfg.tokens)
    cfg.micro_batches = _take(par, "micro_batches", int, errs, "parallelism", cfg.micro_batches)
    cfg.with_allgather = _take(par, "with_allgather", bool, errs, "parallelism", cfg.with_allgather)
    cfg.mapping = _take(par, "mapping", str, errs, "parallelism", cfg.mapping)
    _warn_unknown(par, "parallelism", errs)
    if cfg.mapping not in LAYOUTS:
        errs.append(
            f"parallelism.mapping: unknown mapping {cfg.mapping!r}; valid options: "
            + ", ".join(LAYOUTS)
        )
    if cfg.tokens < 1:
        errs.append("parallelism.tokens: must be >= 1")
    if cfg.micro_batches < 1:
        errs.append("parallelism.micro_batches: must be >= 1")
    device_count = cfg.wafers * cfg.width * cfg.height
    if cfg.dp is not None and cfg.dp * cfg.tp != device_count:
        errs.append(
            f"parallelism: dp*tp must equal the device count: "
            f"dp={cfg.dp} x tp={cfg.tp} != {device_count} devices"
        )

    bal = raw.pop("balancer", {})
    if not isinstance(bal, dict):
        errs.append("balancer: must be a table")
        bal = {}
    cfg.balancer_mode = _take(bal, "mode", str, errs, "balancer", cfg.balancer_mode)
    cfg.alpha = _take(bal, "alpha", float, errs, "balancer", cfg.alpha)
    cfg.beta = _take(bal, "beta", float, errs, "balancer", cfg.beta)
    cfg.slots = _take(bal, "slots", int, errs, "balancer", cfg.slots)
    cfg.window = _take(bal, "window", int, errs, "balancer", cfg.window)
    cfg.cold_threshold = _take(bal, "cold_threshold", float, errs, "balancer", cfg.cold_threshold)
    _warn_unknown(bal, "balancer", errs)
    if cfg.balancer_mode not in MODES:
        errs.append(
            f"balancer.mode: unknown mode {cfg.balancer_mode!r}; valid options: "
            + ", ".join(MODES)
        )
    if cfg.slots < 0:
        errs.append("balancer.slots: must be >= 0")
    if cfg.window < 1:
        errs.append("balancer.window: must be >= 1")

    wl = raw.pop("workload", {})
    if not isinstance(wl, dict):
        errs.append("workload: must be a table")
        wl = {}
    cfg.dist = _take(wl, "dist", str, errs, "workload", cfg.dist)
    cfg.zipf_exponent = _take(wl, "zipf_exponent", float, errs, "workload", cfg.zipf_exponent)
    cfg.drift = _take(wl, "drift", float, errs, "workload", cfg.drift)
    cfg.seed = _take(wl, "seed", int, errs, "workload", cfg.seed)
    cfg.popularity = _take(wl, "popularity", None, errs, "workload", cfg.popularity)
    _warn_unknown(wl, "workload", errs)
    if cfg.dist not in ("zipf", "uniform"):
        errs.append(f"workload.dist: unknown distribution {cfg.dist!r}; use zipf or uniform")
    if not 0.0 <= cfg.drift <= 1.0:
        errs.append("workload.drift: must be in [0, 1]")
    if cfg.popularity is not None:
        pop = np.asarray(cfg.popularity, dtype=float)
        if pop.ndim != 2 or pop.shape[1] != cfg.model.n_experts:
            errs.append(
                "workload.popularity: expected per-layer rows of "
                f"{cfg.model.n_experts} expert weights"
            )
        elif (pop < 0).any() or not (pop.sum(axis=1) > 0).all():
            errs.append("workload.popularity: rows must be non-negative and non-empty")

    comp = raw.pop("compute", {})
    if not isinstance(comp, dict):
        errs.append("compute: must be a table")
        comp = {}
    peak = _take(comp, "peak_flops", float, errs, "compute", cfg.compute.peak_flops)
    mem = _take(comp, "mem_bandwidth", float, errs, "compute", cfg.compute.mem_bandwidth)
    fco = _take(comp, "attn_flops_coeff", float, errs, "compute", cfg.compute.attn_flops_coeff)
    bco = _take(comp, "attn_bytes_coeff", float, errs, "compute", cfg.compute.attn_bytes_coeff)
    _warn_unknown(comp, "compute", errs)
    if peak <= 0 or mem <= 0:
        errs.append("compute: peak_flops and mem_bandwidth must be positive")
    else:
        cfg.compute = ComputeModel(peak, mem, fco, bco)

    out = raw.pop("output", {})
    if not isinstance(out, dict):
        errs.append("output: must be a table")
        out = {}
    cfg.out_dir = _take(out, "dir", str, errs, "output", cfg.out_dir)
    cfg.label = _take(out, "label", str, errs, "output", cfg.label)
    _warn_unknown(out, "output", errs)
    for key in raw:
        errs.append(f"{key}: unknown section")

    # cross-field checks that do not need live objects
    if not errs:
        n_dev = cfg.wafers * cfg.width * cfg.height
        if cfg.model.n_experts % n_dev != 0:
            errs.append(
                f"model/topology: {cfg.model.n_experts} experts do not divide evenly "
                f"over {n_dev} devices"
            )
        if cfg.mapping == HIER_ER and cfg.wafers < 2:
            errs.append(f"parallelism.mapping: {HIER_ER} needs topology.wafers >= 2")
    if errs:
        raise ConfigError(errs)
    return cfg


@dataclass
class Scenario:
    """Live objects assembled from a validated config."""

    cfg: SimConfig
    topo: MeshTopology
    mapping: Mapping
    model: ModelSpec
    gating: GatingModel


def build_scenario(cfg: SimConfig) -> Scenario:
    """Instantiate topology, mapping, and gating; module-level validation
    (supported tp, tile shapes, expert divisibility) happens here."""
    topo = build_mesh(
        cfg.wafers,
        cfg.width,
        cfg.height,
        intra_bandwidth=cfg.intra_bandwidth,
        inter_bandwidth=cfg.inter_bandwidth,
        link_latency=cfg.link_latency,
    )
    pcfg = ParallelismConfig.derive(topo, tp=cfg.tp, tokens_per_tp_group=cfg.tokens)
    mapping = make_mapping(
        cfg.mapping, topo, pcfg, n_experts=cfg.model.n_experts, shadow_slots=cfg.slots
    )
    if cfg.popularity is not None:
        pop = np.asarray(cfg.popularity, dtype=float)
        if pop.shape[0] != cfg.model.moe_layers:
            raise ConfigError(
                f"workload.popularity: {pop.shape[0]} rows for "
                f"{cfg.model.moe_layers} sparse layers"
            )
        pop = pop / pop.sum(axis=1, keepdims=True)
        gating = GatingModel(popularity=pop, seed=cfg.seed, drift=cfg.drift)
    else:
        gating = make_gating(
            cfg.model.n_experts,
            cfg.model.moe_layers,
            dist=cfg.dist,
            alpha=cfg.zipf_exponent,
            seed=cfg.seed,
            drift=cfg.drift,
        )
    return Scenario(cfg=cfg, topo=topo, mapping=mapping, model=cfg.model, gating=gating)


__all__ = [
    "SimConfig",
    "Scenario",
    "parse_config",
    "parse_config_dict",
    "build_scenario",
    "load_raw",
    "MODEL_PRESETS",
]
