"""Report files: a JSON summary plus flat CSV tables.

``summary.json``, ``frames.csv`` and ``cdf.csv`` depend only on config and
seeds. ``timing.csv`` holds wall-clock measurements and is not reproducible.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..errors import DataError
from .metrics import FrameRecord, compute_metrics, record_row

SUMMARY_FILE = "summary.json"
FRAMES_FILE = "frames.csv"
CDF_FILE = "cdf.csv"
TIMING_FILE = "timing.csv"

FRAME_COLUMNS = [f.name for f in dataclasses.fields(FrameRecord) if f.name not in ("timing", "loc_time")]
CDF_COLUMNS = ["policy", "metric", "rank", "value", "fraction"]
TIMING_CATEGORIES = ("matching", "ransac", "filter", "sidechannel")
TIMING_COLUMNS = ["policy", "run", "frame", *TIMING_CATEGORIES, "localization"]

_INT = {"k", "run", "frame", "nodes_tried", "matching_cost", "map_node", "true_node", "map_room", "true_room"}
_FLOAT = {"n_eff", "t_err", "r_err"}
_BOOL = {"attempted", "success"}


def per_run_efficiency(records: Sequence[FrameRecord], policy: str) -> dict:
    """run -> successes / attempts for one policy (runs without attempts omitted)."""
    acc: dict = {}
    for r in records:
        if r.policy == policy and r.attempted:
            a, s = acc.get(r.run, (0, 0))
            acc[r.run] = (a + 1, s + int(r.success))
    return {run: s / a for run, (a, s) in sorted(acc.items())}


def policy_order(records: Sequence[FrameRecord]) -> list:
    seen: dict = {}
    for r in records:
        seen.setdefault(r.policy, None)
    return list(seen)


def summarize(config: dict, seeds: Sequence[int], records: Sequence[FrameRecord], n_nodes: int,
              burn_in: int, policies: Optional[Sequence[str]] = None) -> dict:
    policies = policy_order(records) if policies is None else list(policies)
    out = {}
    for p in policies:
        m = compute_metrics([r for r in records if r.policy == p], burn_in=burn_in)
        eff = per_run_efficiency(records, p)
        d = m.summary()
        d["mean_run_efficiency"] = float(np.mean(list(eff.values()))) if eff else 0.0
        d["run_efficiency"] = [eff.get(i) for i in range(len(seeds))]
        out[p] = d
    return {"config": config, "seeds": [int(s) for s in seeds], "n_nodes": int(n_nodes), "policies": out}


def _cdf_rows(policy: str, metric: str, values: np.ndarray) -> list:
    v = np.sort(np.asarray(values, dtype=float))
    n = v.size
    return [[policy, metric, i, float(x), (i + 1) / n] for i, x in enumerate(v)]


def _write_csv(path: Path, header: list, rows) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)


def emit_report(report, out_dir) -> dict:
    """Write the four report files into ``out_dir``; returns name -> path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    burn_in = int(report.config.get("burn_in", 0))
    keys = list(report.metrics) or policy_order(report.records)
    summary = summarize(report.config, report.seeds, report.records, report.n_nodes, burn_in, keys)
    paths = {name: out / name for name in (SUMMARY_FILE, FRAMES_FILE, CDF_FILE, TIMING_FILE)}

    tmp = paths[SUMMARY_FILE].with_name(SUMMARY_FILE + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, paths[SUMMARY_FILE])

    _write_csv(paths[FRAMES_FILE], FRAME_COLUMNS,
               ([record_row(r)[c] for c in FRAME_COLUMNS] for r in report.records))

    cdf = []
    for p in keys:
        succ = [r for r in report.records if r.policy == p and r.success]
        cdf += _cdf_rows(p, "translation", [r.t_err for r in succ if np.isfinite(r.t_err)])
        cdf += _cdf_rows(p, "orientation", [r.r_err for r in succ if np.isfinite(r.r_err)])
    _write_csv(paths[CDF_FILE], CDF_COLUMNS, cdf)

    timing = []
    for r in report.records:
        t = [float(r.timing.get(c, 0.0)) for c in TIMING_CATEGORIES]
        timing.append([r.policy, r.run, r.frame, *t, float(r.loc_time)])
    _write_csv(paths[TIMING_FILE], TIMING_COLUMNS, timing)
    return paths


def _parse(col: str, v: str):
    if col in _INT:
        return int(v)
    if col in _FLOAT:
        return float(v)
    if col in _BOOL:
        if v not in ("True", "False"):
            raise DataError(f"bad boolean {v!r} in column {col}")
        return v == "True"
    return v


def read_table(path) -> list:
    """Rows of an emitted CSV as dicts with typed values."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        d = {}
        for c, v in row.items():
            if c in ("rank", "run", "frame"):
                d[c] = int(v)
            elif c in ("value", "fraction") or c in TIMING_CATEGORIES or c == "localization":
                d[c] = float(v)
            else:
                d[c] = _parse(c, v)
        out.append(d)
    return out


def read_frames(path) -> list:
    """FrameRecords back from ``frames.csv``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != FRAME_COLUMNS:
            raise DataError(f"{path}: unexpected frame table header")
        try:
            return [FrameRecord(**{c: _parse(c, row[c]) for c in FRAME_COLUMNS}) for row in reader]
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from exc
