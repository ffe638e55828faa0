"""Report emission: JSON documents and long-format CSV tables."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

from .config import ExperimentConfig

ATTACK_METRICS = ("detection_rate", "recognition_rate", "per_run_detection", "asr",
                  "mean_queries_to_success", "mean_rho", "runs", "checkpoints")


def _clean(obj):
    # strict JSON: NaN/inf become null, numpy scalars become Python numbers
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def make_report(cfg: ExperimentConfig, kind: str, body) -> dict:
    return {"kind": kind, "config_hash": cfg.hash(), "seeds": cfg.all_seeds(),
            "config": cfg.experiment(), "result": body}


def _seed_str(seeds: dict) -> str:
    return ";".join(f"{k}={seeds[k]}" for k in sorted(seeds))


def to_csv(report: dict) -> str:
    """One row per (attack, metric) for pipeline runs, one row per point otherwise."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = [report["config_hash"], _seed_str(report["seeds"])]
    body = report["result"]
    if report["kind"] == "run":
        w.writerow(["config_hash", "seeds", "attack", "metric", "value"])
        for attack in sorted(body["attacks"]):
            stats = body["attacks"][attack]
            for m in ATTACK_METRICS:
                w.writerow(head + [attack, m, _fmt(stats.get(m))])
    elif isinstance(body, list):
        keys = sorted({k for row in body for k, v in row.items() if not isinstance(v, dict)})
        w.writerow(["config_hash", "seeds"] + keys)
        for row in body:
            w.writerow(head + [_fmt(row.get(k)) for k in keys])
    else:
        raise ValueError(f"no CSV layout for report kind {report['kind']!r}")
    return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if not math.isfinite(v) else repr(v)
    return str(v)


def to_json(report: dict) -> str:
    return json.dumps(_clean(report), indent=2, sort_keys=True, allow_nan=False) + "\n"


def emit_report(report: dict, path, fmt: str = "json") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        text = to_json(report)
    elif fmt == "csv":
        text = to_csv(_clean(report))
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    # write-then-rename so a failure never leaves a partial report behind
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
    return path


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())
