"""Command-line entry point: ``python3 -m gwad <subcommand> [options]``.

Exit codes: 0 success, 1 configuration error, 2 stage failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..detector import (HodsDataset, TrainConfig, build_dataset, read_dataset_csv,
                        save_detector, train_detector, write_dataset_csv)
from ..lab.config import Method
from ..lab.trace import benign_stream, load_sidecar, load_trace, save_trace
from ..monitor import ds_series, write_ds_csv
from ..nn import save_weights
from ..numkit import make_rng
from . import pipeline as pl
from .config import ConfigError, ExperimentConfig, load_config
from .report import emit_report, load_report, make_report

log = logging.getLogger("gwad")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="global seed, overrides the config")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--format", choices=("csv", "json"), help="report format")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="gwad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    sub.add_parser("train-victim", parents=[common], help="train and save the victim model")

    p = sub.add_parser("gen-traces", parents=[common], help="record attack query traces")
    p.add_argument("--attacks", nargs="+", choices=[m.value for m in Method])
    p.add_argument("--set", choices=("train", "eval"), default="train")
    p.add_argument("--n", type=int, help="traces per attack (default: from config)")

    p = sub.add_parser("build-dataset", parents=[common], help="HoDS dataset as CSV")
    p.add_argument("--traces", type=Path, help="directory of .gwtr traces (default: generate)")

    p = sub.add_parser("train-detector", parents=[common], help="train the HoDS classifier")
    p.add_argument("--dataset", type=Path, help="dataset CSV (default: build in memory)")

    sub.add_parser("run", parents=[common], help="full pipeline, writes a report")

    p = sub.add_parser("sweep-injection", parents=[common], help="detection vs benign injection")
    p.add_argument("--r-b", type=float, nargs="+", dest="r_b")
    p.add_argument("--attack", choices=[m.value for m in Method])

    p = sub.add_parser("ablate-window", parents=[common], help="recognition vs HoDS window")
    p.add_argument("--sizes", type=int, nargs="+")

    p = sub.add_parser("ds-hist", parents=[common], help="DS series and histogram")
    p.add_argument("--trace", type=Path, help="a .gwtr trace (default: a benign stream)")
    p.add_argument("--n", type=int, default=2000, help="benign stream length")
    p.add_argument("--bins", type=int, default=40)

    p = sub.add_parser("report", parents=[common], help="re-emit a JSON report")
    p.add_argument("--input", type=Path, required=True)
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig({})
    over = {}
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        over["seed"] = args.seed
    if args.out is not None:
        over["output"] = {"dir": str(args.out.resolve())}
    if args.format is not None:
        over["output"] = {**over.get("output", {}), "format": args.format}
    return cfg.with_overrides(**over) if over else cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    d = cfg.resolve(cfg["output"]["dir"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def _emit(cfg, kind, body, name) -> Path:
    fmt = cfg["output"]["format"]
    path = _out_dir(cfg) / f"{name}.{fmt}"
    emit_report(make_report(cfg, kind, body), path, fmt)
    print(path)
    return path


def cmd_train_victim(cfg, args):
    with pl.stage("data"):
        train, test = pl.make_data(cfg)
    with pl.stage("victim"):
        victim = pl.make_victim(cfg, train)
        path = _out_dir(cfg) / "victim.gwnn"
        save_weights(victim.net, path)
    print(f"{path}  train_acc={victim.accuracy(train):.4f} test_acc={victim.accuracy(test):.4f}")


def cmd_gen_traces(cfg, args):
    ws = pl.prepare(cfg)
    methods = [Method(m) for m in args.attacks] if args.attacks else cfg.methods
    sources = ws.train_sources if args.set == "train" else ws.eval_sources
    if args.n is not None:
        sources = sources[:args.n]
    key = "train_traces" if args.set == "train" else "eval_traces"
    tdir = _out_dir(cfg) / "traces"
    tdir.mkdir(exist_ok=True)
    with pl.stage("traces"):
        for m in methods:
            for i, (trace, outcome) in enumerate(
                    pl.attack_runs(ws, m, sources, key, cfg.attack_config())):
                path = tdir / f"{m.value}_{args.set}_{i:03d}.gwtr"
                save_trace(trace, path, {"method": m.value, "class_id": m.class_id,
                                         "index": i, "seed": cfg.seed(key),
                                         "config_hash": cfg.hash(),
                                         "outcome": outcome.to_dict()})
                print(path)


def _dataset(cfg, args) -> HodsDataset:
    ws = pl.prepare(cfg)
    if getattr(args, "traces", None):
        by_class: dict[int, list] = {}
        with pl.stage("dataset"):
            for path in sorted(Path(args.traces).glob("*.gwtr")):
                meta = load_sidecar(path)
                by_class.setdefault(int(meta["class_id"]), []).append(load_trace(path))
            if not by_class:
                raise ValueError(f"no .gwtr traces in {args.traces}")
            rng = make_rng(cfg.seed("checkpoints"), "train", cfg.window)
            attack = build_dataset(by_class, cfg["checkpoints"]["train_per_trace"],
                                   cfg.window, rng)
            if attack.skipped:
                log.warning("%d traces too short for the window were skipped", attack.skipped)
            benign = pl.training_set(ws, {}, cfg.window)
            return HodsDataset.concat([attack, benign])
    series = pl.training_series(ws)
    with pl.stage("dataset"):
        return pl.training_set(ws, series, cfg.window)


def cmd_build_dataset(cfg, args):
    ds = _dataset(cfg, args)
    path = _out_dir(cfg) / "dataset.csv"
    write_dataset_csv(ds, path)
    print(f"{path}  rows={len(ds)} per_class={ds.class_counts().tolist()} skipped={ds.skipped}")


def cmd_train_detector(cfg, args):
    if args.dataset:
        with pl.stage("dataset"):
            ds = read_dataset_csv(args.dataset)
    else:
        ds = _dataset(cfg, args)
    det = cfg["detector"]
    with pl.stage("detector"):
        tc = TrainConfig(det["epochs"], det["batch_size"], det["learning_rate"],
                         det["momentum"], cfg.seed("detector"))
        net, curve = train_detector(ds, tc)
        out = _out_dir(cfg)
        save_detector(net, out / "detector.gwnn")
        (out / "detector_loss.json").write_text(json.dumps(curve))
    print(f"{out / 'detector.gwnn'}  final_loss={curve[-1]:.5f}")


def cmd_run(cfg, args):
    body = pl.run_pipeline(cfg)
    with pl.stage("report"):
        _emit(cfg, "run", body, "report")


def cmd_sweep(cfg, args):
    rows = pl.injection_sweep(cfg, args.r_b, method=args.attack)
    with pl.stage("report"):
        _emit(cfg, "sweep-injection", rows, "sweep_injection")


def cmd_ablate(cfg, args):
    rows = pl.ablation_window(cfg, args.sizes)
    with pl.stage("report"):
        _emit(cfg, "ablate-window", rows, "ablate_window")


def cmd_ds_hist(cfg, args):
    with pl.stage("traces"):
        if args.trace:
            queries = load_trace(args.trace).queries
            name = args.trace.stem
        else:
            train, test = pl.make_data(cfg)
            queries = benign_stream(test, args.n, make_rng(cfg.seed("benign"), "ds-hist")).queries
            name = "benign"
        vals, _ = ds_series(queries, cfg.window)
    with pl.stage("report"):
        write_ds_csv(_out_dir(cfg) / f"ds_{name}.csv", vals)
        body = {"source": name, "n": int(len(vals)),
                "mean": float(np.mean(vals)) if len(vals) else None,
                "median": float(np.median(vals)) if len(vals) else None,
                "histogram": pl.ds_histogram(vals, args.bins)}
        if cfg["output"]["format"] == "csv":
            _emit(cfg, "ds-hist", body["histogram"], f"ds_hist_{name}")
        else:
            _emit(cfg, "ds-hist", body, f"ds_hist_{name}")


def cmd_report(cfg, args):
    with pl.stage("report"):
        rep = load_report(args.input)
        fmt = cfg["output"]["format"]
        path = _out_dir(cfg) / f"{args.input.stem}.{fmt}"
        emit_report(rep, path, fmt)
        print(path)


COMMANDS = {
    "train-victim": cmd_train_victim,
    "gen-traces": cmd_gen_traces,
    "build-dataset": cmd_build_dataset,
    "train-detector": cmd_train_detector,
    "run": cmd_run,
    "sweep-injection": cmd_sweep,
    "ablate-window": cmd_ablate,
    "ds-hist": cmd_ds_hist,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.cmd](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except pl.PipelineError as e:
        print(f"stage failure: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        print(f"stage failure: [{args.cmd}] {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0
