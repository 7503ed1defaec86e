"""Command-line front end: map | heatmap | simulate | balance-trace | compare.

Every artifact is plain CSV or JSON, written atomically, and
reproducible byte-for-byte from the same config and seed.  Plotting is
left to external tools.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from pathlib import Path

from .config import SimConfig, Scenario, build_scenario, parse_config
from .engine import IterationMetrics, Simulation, SimulationResult, run_simulation
from .errors import ConfigError
from .mapping import avg_hops, compute_ftds, ftd_intersections, render_ascii
from .topology import DeviceCoord

log = logging.getLogger("wafermoe")

TRACE_COLUMNS = (
    "iteration",
    "wall_time",
    "attention_time",
    "moe_time",
    "migration_overhead",
    "imbalance",
    "trigger",
    "moves_issued",
    "moves_completed",
    "migration_bytes_in_flight",
)

BALANCE_COLUMNS = (
    "iteration",
    "imbalance",
    "trigger",
    "moves_issued",
    "moves_completed",
    "migration_bytes_in_flight",
    "hot_migration_bytes",
    "added_critical_path",
)

COMPARE_METRICS = (
    "wall_mean",
    "wall_p95",
    "attention_time_mean",
    "moe_time_mean",
    "allreduce_latency",
    "alltoall_mean",
    "migration_overhead_total",
    "device_tokens_per_s",
)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coord(c: DeviceCoord) -> list[int]:
    return [c.wafer, c.x, c.y]


class OutputSet:
    """Tracks files written by one invocation so a failure can remove
    the partial set."""

    def __init__(self, out_dir: Path) -> None:
        self.out_dir = out_dir
        self.written: list[Path] = []

    def write_text(self, name: str, text: str) -> Path:
        return self._commit(name, text.encode())

    def write_json(self, name: str, payload) -> Path:
        body = json.dumps(payload, indent=2, sort_keys=True) + "\n"
        return self._commit(name, body.encode())

    def write_csv(self, name: str, header, rows) -> Path:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
        return self._commit(name, buf.getvalue().encode())

    def _commit(self, name: str, data: bytes) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        final = self.out_dir / name
        tmp = final.with_name(final.name + ".tmp")
        try:
            tmp.write_bytes(data)
            os.replace(tmp, final)
        except OSError:
            tmp.unlink(missing_ok=True)
            raise
        self.written.append(final)
        log.info("wrote %s", final)
        return final

    def rollback(self) -> None:
        for path in self.written:
            path.unlink(missing_ok=True)
        self.written.clear()


def _load(args, seed: int | None = None) -> SimConfig:
    cfg = parse_config(args.config)
    if seed is None:
        seed = getattr(args, "seed", None)
    if seed is not None:
        cfg.seed = seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def _config_echo(cfg: SimConfig) -> dict:
    body = dataclasses.asdict(cfg)
    body.pop("out_dir", None)  # output location is not part of the experiment
    body.pop("label", None)
    return body


def _run(cfg: SimConfig, iterations: int) -> tuple[Scenario, SimulationResult]:
    scenario = build_scenario(cfg)
    result = run_simulation(
        scenario.topo,
        scenario.mapping,
        scenario.model,
        scenario.gating,
        compute=cfg.compute,
        settings=cfg.settings(),
        iterations=iterations,
    )
    return scenario, result


def _trace_rows(trace: list[IterationMetrics]):
    for m in trace:
        yield (
            m.iteration,
            m.wall_time,
            m.attention_time,
            m.moe_time,
            m.migration_overhead,
            m.imbalance,
            m.trigger,
            m.moves_issued,
            m.moves_completed,
            m.migration_bytes_in_flight,
        )


def cmd_map(args) -> int:
    cfg = _load(args)
    scenario = build_scenario(cfg)
    topo, mapping = scenario.topo, scenario.mapping
    ftds = compute_ftds(mapping, topo)
    overlap = ftd_intersections(ftds)
    payload = {
        "layout": mapping.layout,
        "wafers": topo.wafer_count,
        "width": topo.width,
        "height": topo.height,
        "tp": mapping.cfg.tp,
        "dp": mapping.cfg.dp,
        "groups": [
            {"group": g, "members": [_coord(m) for m in members]}
            for g, members in enumerate(mapping.members)
        ],
        "regions": [[_coord(d) for d in region] for region in mapping.regions],
        "native_experts": {
            str(topo.linear_index(d)): list(mapping.native_experts[d])
            for d in sorted(mapping.native_experts)
        },
        "ftds": [
            {
                "group": g,
                "anchor": _coord(dom.anchor),
                "members": [_coord(m) for m in dom.members],
                "region": [_coord(d) for d in dom.region],
            }
            for g, dom in enumerate(ftds)
        ],
        "avg_hops": avg_hops(ftds, topo),
        "intersection": {
            "shared_devices": [_coord(d) for d in overlap.shared_devices],
            "shared_link_count": overlap.shared_link_count,
        },
    }
    out = OutputSet(Path(cfg.out_dir))
    try:
        out.write_json("mapping.json", payload)
        out.write_text("grid.txt", render_ascii(mapping, topo) + "\n")
    except Exception:
        out.rollback()
        raise
    return 0


def cmd_heatmap(args) -> int:
    cfg = _load(args)
    scenario, result = _run(cfg, args.iterations)
    topo = scenario.topo
    totals: dict = {}
    for m in result.trace:
        for key, volume in m.link_bytes.items():
            totals[key] = totals.get(key, 0.0) + volume
    rows = []
    for (src, dst), volume in sorted(totals.items()):
        kind = "inter" if src.wafer != dst.wafer else "intra"
        rows.append((*_coord(src), *_coord(dst), kind, volume))
    out = OutputSet(Path(cfg.out_dir))
    try:
        out.write_csv(
            "links.csv",
            ("src_wafer", "src_x", "src_y", "dst_wafer", "dst_x", "dst_y", "kind", "bytes"),
            rows,
        )
    except Exception:
        out.rollback()
        raise
    return 0


def cmd_simulate(args) -> int:
    cfg = _load(args)
    scenario, result = _run(cfg, args.iterations)
    summary = {
        "aggregates": result.aggregates,
        "config": _config_echo(cfg),
        "iterations": args.iterations,
    }
    out = OutputSet(Path(cfg.out_dir))
    try:
        out.write_csv("trace.csv", TRACE_COLUMNS, _trace_rows(result.trace))
        out.write_json("summary.json", summary)
    except Exception:
        out.rollback()
        raise
    return 0


def cmd_balance_trace(args) -> int:
    cfg = _load(args)
    _, result = _run(cfg, args.iterations)
    rows = [
        (
            m.iteration,
            m.imbalance,
            m.trigger,
            m.moves_issued,
            m.moves_completed,
            m.migration_bytes_in_flight,
            m.hot_migration_bytes,
            m.migration_overhead,
        )
        for m in result.trace
    ]
    out = OutputSet(Path(cfg.out_dir))
    try:
        out.write_csv("balance.csv", BALANCE_COLUMNS, rows)
    except Exception:
        out.rollback()
        raise
    return 0


def _metric_values(result: SimulationResult, scenario: Scenario) -> dict[str, float]:
    agg = result.aggregates
    layers = [layer for m in result.trace for layer in m.layers]
    a2a = (
        sum(l.dispatch + l.combine for l in layers) / len(layers) if layers else 0.0
    )
    sim = Simulation(
        scenario.topo,
        scenario.mapping,
        scenario.model,
        scenario.gating,
        compute=scenario.cfg.compute,
        settings=scenario.cfg.settings(),
    )
    return {
        "wall_mean": agg["wall_mean"],
        "wall_p95": agg["wall_p95"],
        "attention_time_mean": agg["attention_time_mean"],
        "moe_time_mean": agg["moe_time_mean"],
        "allreduce_latency": sim.ar_latency,
        "alltoall_mean": a2a,
        "migration_overhead_total": agg["migration_overhead_total"],
        "device_tokens_per_s": agg["device_tokens_per_s"],
    }


def cmd_compare(args) -> int:
    labels: list[str] = []
    columns: list[dict[str, float]] = []
    out_dir: Path | None = None
    for path in args.config:
        cfg = parse_config(path)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out:
            cfg.out_dir = args.out
        if out_dir is None:
            out_dir = Path(cfg.out_dir)
        label = cfg.label or Path(path).stem
        while label in labels:
            label += "_"
        labels.append(label)
        scenario, result = _run(cfg, args.iterations)
        columns.append(_metric_values(result, scenario))
    header = ["metric", *labels]
    header += [f"ratio_{labels[0]}_over_{lab}" for lab in labels[1:]]
    rows = []
    for metric in COMPARE_METRICS:
        row = [metric] + [col[metric] for col in columns]
        base = columns[0][metric]
        for col in columns[1:]:
            if col[metric]:
                row.append(base / col[metric])
            else:
                row.append(1.0 if base == 0 else float("inf"))
        rows.append(row)
    out = OutputSet(out_dir if out_dir is not None else Path("out"))
    try:
        out.write_csv("compare.csv", header, rows)
    except Exception:
        out.rollback()
        raise
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wafermoe",
        description="Mapping, traffic, and balancing analysis for expert-parallel meshes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, iterations_default=None):
        p.add_argument("--seed", type=int, default=None, help="override the workload seed")
        p.add_argument("--out", default=None, help="override the output directory")
        if iterations_default is not None:
            p.add_argument(
                "--iterations",
                type=int,
                default=iterations_default,
                help="number of training iterations to simulate",
            )

    p_map = sub.add_parser("map", help="export the device mapping and token domains")
    p_map.add_argument("--config", required=True)
    common(p_map)
    p_map.set_defaults(func=cmd_map)

    p_heat = sub.add_parser("heatmap", help="export accumulated per-link traffic")
    p_heat.add_argument("--config", required=True)
    common(p_heat, iterations_default=1)
    p_heat.set_defaults(func=cmd_heatmap)

    p_sim = sub.add_parser("simulate", help="run iterations and export trace + summary")
    p_sim.add_argument("--config", required=True)
    common(p_sim, iterations_default=8)
    p_sim.set_defaults(func=cmd_simulate)

    p_bal = sub.add_parser("balance-trace", help="export per-iteration balancer activity")
    p_bal.add_argument("--config", required=True)
    common(p_bal, iterations_default=8)
    p_bal.set_defaults(func=cmd_balance_trace)

    p_cmp = sub.add_parser("compare", help="run one workload under several configs")
    p_cmp.add_argument("--config", required=True, nargs="+")
    common(p_cmp, iterations_default=4)
    p_cmp.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("WAFERMOE_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "iterations", 1) < 1:
        parser.error("--iterations must be >= 1")
    try:
        return args.func(args)
    except ConfigError as exc:
        for msg in exc.messages:
            print(f"error: {msg}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
