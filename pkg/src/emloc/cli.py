"""Command-line entry point.

Verbs: simulate, assemble, localize, bench, report. Each verb reads its own
section of an optional config file (YAML or JSON), then applies
``--set key=value`` overrides, then the dedicated flags, and writes the
resolved config next to its outputs as ``config.json``.

Exit codes: 0 success, 2 config error, 3 data error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .assembler.assemble import AssemblyConfig, assemble
from .assembler.traces import (
    load_ground_truth,
    load_trace,
    save_ground_truth,
    save_trace,
)
from .bench.metrics import compute_metrics, records_from_outputs
from .bench.report import FRAMES_FILE, emit_report, read_frames
from .bench.runner import BenchConfig, RunReport, aggregate, benchmark_from_config
from .config import apply_overrides, build_dataclass, load_config, to_plain, write_resolved
from .errors import ConfigError, DataError, EmlocError, UnknownScenarioError
from .graph import load_graph, save_graph
from .localizer import Localizer, LocalizerConfig, frames_from_trace
from .simworld.scenarios import make_benchmark_scenario
from .vision import CameraIntrinsics

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3
CONFIG_NAME = "config.json"

log = logging.getLogger("emloc")

SIMULATE_KEYS = {"scenario", "seed", "query_seed", "params"}
ASSEMBLE_KEYS = {"traces", "anchor_truth", "assembly"}
LOCALIZE_KEYS = {"graph", "query", "truth", "localizer", "intrinsics"}


def _section(args, verb: str) -> dict:
    cfg = load_config(args.config) if args.config else {}
    sec = cfg.get(verb, {}) if verb in cfg else {}
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {verb!r} must be a mapping")
    return apply_overrides(sec, args.set or [])


def _check_keys(d: dict, allowed: set, verb: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"{verb}: unknown config keys {unknown}")


def _out(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    return out


def cmd_simulate(args) -> int:
    d = _section(args, "simulate")
    for flag in ("scenario", "seed", "query_seed"):
        if getattr(args, flag, None) is not None:
            d[flag] = getattr(args, flag)
    d.setdefault("scenario", "two-rooms")
    d.setdefault("seed", 0)
    d.setdefault("query_seed", None)
    d.setdefault("params", {})
    _check_keys(d, SIMULATE_KEYS, "simulate")
    try:
        sc = make_benchmark_scenario(d["scenario"], int(d["seed"]), d["query_seed"], **d["params"])
    except TypeError as exc:
        raise ConfigError(f"simulate params: {exc}") from exc
    out = _out(args)
    names = []
    for i, (tr, gt) in enumerate(zip(sc.mapping, sc.mapping_truth)):
        # the occupancy model travels with the first mapping trace
        tr = dataclasses.replace(tr, depth=sc.world.depth) if i == 0 else tr
        save_trace(tr, out / f"mapping-{i}.trace.json")
        save_ground_truth(gt, out / f"mapping-{i}.truth.json")
        names.append(f"mapping-{i}.trace.json")
    save_trace(sc.query, out / "query.trace.json")
    save_ground_truth(sc.truth, out / "query.truth.json")
    d["query_seed"] = sc.query_seed
    write_resolved({"simulate": d}, out / CONFIG_NAME)
    print(f"wrote {len(names)} mapping traces and one query trace to {out}")
    return EXIT_OK


def cmd_assemble(args) -> int:
    d = _section(args, "assemble")
    if args.traces:
        d["traces"] = list(args.traces)
    if args.anchor_truth:
        d["anchor_truth"] = args.anchor_truth
    _check_keys(d, ASSEMBLE_KEYS, "assemble")
    paths = d.get("traces") or []
    if not paths:
        raise ConfigError("assemble: no input traces given")
    traces = [load_trace(p) for p in paths]
    acfg = dict(d.get("assembly") or {})
    if d.get("anchor_truth") and "anchor_pose" not in acfg:
        acfg["anchor_pose"] = load_ground_truth(d["anchor_truth"]).poses[0].to_dict()
    cfg = build_dataclass(AssemblyConfig, acfg, "assembly")
    depth = next((t.depth for t in traces if t.depth is not None), None)
    g = assemble(traces, depth=depth, config=cfg)
    out = _out(args)
    save_graph(g, out / "graph.json")
    write_resolved({"assemble": {**d, "assembly": to_plain(cfg)}}, out / CONFIG_NAME)
    print(f"graph with {len(g)} nodes written to {out / 'graph.json'}")
    return EXIT_OK


def cmd_localize(args) -> int:
    d = _section(args, "localize")
    for flag in ("graph", "query", "truth"):
        if getattr(args, flag, None):
            d[flag] = getattr(args, flag)
    if args.k is not None:
        d.setdefault("localizer", {})["k"] = args.k
    _check_keys(d, LOCALIZE_KEYS, "localize")
    if not d.get("graph") or not d.get("query"):
        raise ConfigError("localize: a graph and a query trace are required")
    lcfg = build_dataclass(LocalizerConfig, d.get("localizer"), "localizer")
    K = build_dataclass(CameraIntrinsics, d.get("intrinsics"), "intrinsics")
    g = load_graph(d["graph"])
    trace = load_trace(d["query"])
    loc = Localizer(g, lcfg, K)
    outputs = [loc.step(f) for f in frames_from_trace(trace)]
    out = _out(args)
    rows = []
    for o in outputs:
        p = o.pnp_pose.to_vector().tolist() if o.pnp_pose is not None else [float("nan")] * 6
        rows.append([o.frame_index, o.map_node, repr(o.n_eff), o.pnp_attempted, o.success,
                     len(o.attempted_nodes), o.matching_cost, *o.pose.to_vector().tolist(), *p])
    with open(out / "trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "map_node", "n_eff", "attempted", "success", "nodes_tried", "matching_cost",
                    *[f"fused_{c}" for c in "xyzwpr"], *[f"pnp_{c}" for c in "xyzwpr"]])
        w.writerows(rows)
    summary = {"frames": len(outputs), "attempts": sum(o.pnp_attempted for o in outputs),
               "successes": sum(o.success for o in outputs)}
    if d.get("truth"):
        truth = load_ground_truth(d["truth"])
        recs = records_from_outputs(outputs, truth, "EMLOC", lcfg.k, 0, None)
        summary = compute_metrics(recs).summary()
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_resolved({"localize": {**d, "localizer": to_plain(lcfg), "intrinsics": to_plain(K)}},
                   out / CONFIG_NAME)
    print(f"localized {len(outputs)} frames: {summary['successes']} successes in {summary['attempts']} attempts")
    return EXIT_OK


def _bench_config(args) -> BenchConfig:
    d = _section(args, "bench")
    for flag in ("scenario", "runs"):
        if getattr(args, flag, None) is not None:
            d[flag] = getattr(args, flag)
    if args.seed is not None:
        d["world_seed"] = args.seed
    return build_dataclass(BenchConfig, d, "bench")


def cmd_bench(args) -> int:
    cfg = _bench_config(args)
    out = _out(args)
    graph = load_graph(args.graph) if args.graph else None
    report = benchmark_from_config(cfg, graph)
    write_resolved({"bench": cfg.to_dict()}, out / CONFIG_NAME)
    emit_report(report, out)
    for key, m in report.metrics.items():
        print(f"{key:>16s}  efficiency {m.efficiency:.3f}  cost {m.matching_cost}")
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.run_dir)
    cfg_path = src / CONFIG_NAME
    if not cfg_path.exists() or not (src / FRAMES_FILE).exists():
        raise DataError(f"{src} does not hold a bench run ({CONFIG_NAME} and {FRAMES_FILE} expected)")
    try:
        raw = json.loads(cfg_path.read_text())["bench"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"{cfg_path}: not a bench config") from exc
    cfg = build_dataclass(BenchConfig, raw, "bench")
    records = read_frames(src / FRAMES_FILE)
    summary_src = src / "summary.json"
    n_nodes = json.loads(summary_src.read_text()).get("n_nodes", 0) if summary_src.exists() else 0
    report = RunReport(cfg.to_dict(), cfg.query_seeds, records, aggregate(records, cfg.policies, cfg.burn_in),
                       n_nodes)
    out = _out(args)
    emit_report(report, out)
    print(f"report for {len(records)} frame records written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON file with one section per verb")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry of this verb (dotted keys, YAML values)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="emloc", description="Graph-based indoor localization toolkit")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate mapping and query traces")
    s.add_argument("--scenario")
    s.add_argument("--seed", type=int)
    s.add_argument("--query-seed", dest="query_seed", type=int)
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("assemble", parents=[common], help="build a localization graph from traces")
    a.add_argument("traces", nargs="*")
    a.add_argument("--anchor-truth", dest="anchor_truth", help="ground-truth file whose first pose anchors the map")
    a.set_defaults(func=cmd_assemble)

    lz = sub.add_parser("localize", parents=[common], help="run the filter over a query trace")
    lz.add_argument("--graph")
    lz.add_argument("--query")
    lz.add_argument("--truth")
    lz.add_argument("--k", type=int)
    lz.set_defaults(func=cmd_localize)

    b = sub.add_parser("bench", parents=[common], help="compare candidate policies on a scenario")
    b.add_argument("--scenario")
    b.add_argument("--runs", type=int)
    b.add_argument("--seed", type=int, help="world seed")
    b.add_argument("--graph", help="reuse a previously assembled graph of the same scenario")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("report", parents=[common], help="rebuild report tables from a bench run")
    r.add_argument("run_dir")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UnknownScenarioError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EmlocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
