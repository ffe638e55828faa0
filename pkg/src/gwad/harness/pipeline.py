"""End-to-end experiment orchestration.

Stages: data -> victim -> training traces -> HoDS dataset -> detector ->
evaluation traces (optionally benign-injected and screened) -> checkpoints ->
verdicts -> aggregate. Every random choice is drawn from a stage seed in the
config, so a config fully determines its report.
"""
from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..detector import (BENIGN, CLASS_NAMES, N_CLASSES, HodsDataset, TrainConfig,
                        benign_dataset, build_from_ds, checkpoint_features, classify,
                        evaluate_predictions, load_detector, train_detector)
from ..lab.attacks import AttackOutcome, PreconditionError, run_attack
from ..lab.config import AttackConfig, Method
from ..lab.data import Dataset, make_synth_dataset
from ..lab.trace import QueryTrace, benign_stream, consumption_profile, inject_benign
from ..lab.victim import VictimModel, train_victim
from ..monitor import N_BINS, ds_series, hods_from_values
from ..nn import Mlp, load_weights
from ..numkit import make_rng
from ..screener import CannyParams, Screener
from .config import ExperimentConfig

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    def __init__(self, stage: str, msg: str):
        super().__init__(f"[{stage}] {msg}")
        self.stage = stage


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except PipelineError:
        raise
    except Exception as e:  # noqa: BLE001 - every failure gets a stage tag
        raise PipelineError(name, f"{type(e).__name__}: {e}") from e


# -- data and victims -------------------------------------------------------

@dataclass
class Workspace:
    """Objects shared by the stages of one experiment."""
    cfg: ExperimentConfig
    train: Dataset
    test: Dataset
    victim: VictimModel
    train_sources: list[int]
    eval_sources: list[int]
    eval_pool: Dataset
    extra: dict = field(default_factory=dict)


def make_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg["data"]
    full = make_synth_dataset(d["n_per_class"], d["d"], d["n_classes"],
                              make_rng(cfg.seed("data"), "images"))
    test, train = full.split(d["test_frac"], make_rng(cfg.seed("data"), "split"))
    return train, test


def make_victim(cfg: ExperimentConfig, train: Dataset, seed_key: str = "victim") -> VictimModel:
    v = cfg["victim"]
    if v["weights"] is not None and seed_key == "victim":
        net = load_weights(cfg.resolve(v["weights"]))
        if net.sizes[0] != train.d:
            raise ValueError("victim weights do not match the data dimension")
        return VictimModel(net, train.shape)
    return train_victim(train, v["epochs"], make_rng(cfg.seed(seed_key), "victim"),
                        hidden=v["hidden"], lr=v["lr"], momentum=v["momentum"],
                        batch_size=v["batch_size"])


def pick_sources(victims: list[VictimModel], test: Dataset, n: int, rng,
                 exclude: set[int] = frozenset()) -> list[int]:
    """First ``n`` test images (in seeded order) every victim classifies correctly."""
    out = []
    for i in rng.permutation(len(test)):
        if len(out) == n:
            break
        if i in exclude:
            continue
        if all(v.label_of(test.x[i]) == test.y[i] for v in victims):
            out.append(int(i))
    if len(out) < n:
        raise ValueError(f"only {len(out)} correctly classified source images, need {n}")
    return out


def prepare(cfg: ExperimentConfig) -> Workspace:
    with stage("data"):
        train, test = make_data(cfg)
    with stage("victim"):
        victim = make_victim(cfg, train)
        log.info("victim accuracy train %.3f test %.3f",
                 victim.accuracy(train), victim.accuracy(test))
    with stage("traces"):
        rng = make_rng(cfg.seed("data"), "sources")
        n_train = cfg["train_traces_per_attack"]
        n_eval = cfg["eval_traces_per_attack"]
        srcs = pick_sources([victim], test, n_train + n_eval, rng)
        keep = np.setdiff1d(np.arange(len(test)), srcs)
        pool = test.subset(keep)
    return Workspace(cfg, train, test, victim, srcs[:n_train], srcs[n_train:], pool)


# -- traces -----------------------------------------------------------------

def attack_runs(ws: Workspace, method: Method, sources: list[int], seed_key: str,
                acfg: AttackConfig, victim: VictimModel | None = None):
    """Yield (trace, outcome) per source image; full budget, no early stop."""
    victim = victim or ws.victim
    acfg = acfg.replace(method=method, stop_on_success=False)
    seed = ws.cfg.seed(seed_key)
    for i, src in enumerate(sources):
        x0, y = ws.test.x[src], int(ws.test.y[src])
        try:
            yield run_attack(method, victim, x0, acfg, make_rng(seed, method.value, i), label=y)
        except PreconditionError:
            log.warning("skipping source %d: misclassified by this victim", src)


def benign_window_features(pool: Dataset, n: int, window: int, rng) -> np.ndarray:
    """One HoDS per independent benign stream of ``window + 2`` images."""
    out = np.empty((n, N_BINS))
    for k in range(n):
        vals, _ = ds_series(benign_stream(pool, window + 2, rng).queries, window)
        out[k] = hods_from_values(vals[-window:])
    return out


def training_series(ws: Workspace) -> dict[int, list[np.ndarray]]:
    """DS series of every training trace plus its benign-injected variants."""
    cfg = ws.cfg
    rates = [0.0] + [float(r) for r in cfg["detector"]["augment_r_b"]]
    rng = make_rng(cfg.seed("injection"), "augment")
    out: dict[int, list[np.ndarray]] = {}
    for m in cfg.methods:
        series = out.setdefault(m.class_id, [])
        for trace, _ in attack_runs(ws, m, ws.train_sources, "train_traces",
                                    cfg.attack_config(alpha_max=None, r_mu=None)):
            for r in rates:
                stream = inject_benign(trace, r, ws.train, rng) if r else trace
                series.append(ds_series(stream.queries)[0])
    ws.extra["train_rates"] = rates
    return out


def training_set(ws: Workspace, series: dict[int, list[np.ndarray]], window: int) -> HodsDataset:
    cfg = ws.cfg
    rng = make_rng(cfg.seed("checkpoints"), "train", window)
    per = cfg["checkpoints"]["train_per_trace"]
    per_variant = max(1, math.ceil(per / len(ws.extra.get("train_rates", [0.0]))))
    attack = build_from_ds(series, per_variant, window, rng)
    det = cfg["detector"]
    brng = make_rng(cfg.seed("benign"), "train", window)
    synth = benign_dataset(det["benign_per_dist"], window, brng)
    parts = [attack, synth]
    if det["benign_streams"]:
        real = benign_window_features(ws.train, det["benign_streams"], window, brng)
        parts.append(HodsDataset(real, np.zeros(len(real), dtype=np.int64)))
    return HodsDataset.concat(parts)


def get_detector(ws: Workspace, window: int | None = None,
                 series: dict[int, list[np.ndarray]] | None = None) -> tuple[Mlp, list[float]]:
    cfg = ws.cfg
    window = window or cfg.window
    det = cfg["detector"]
    if det["weights"] is not None and window == cfg.window:
        with stage("detector"):
            return load_detector(cfg.resolve(det["weights"])), []
    with stage("traces"):
        if series is None:
            series = training_series(ws)
    with stage("dataset"):
        ds = training_set(ws, series, window)
        ws.extra.setdefault("train_counts", {})[window] = ds.class_counts().tolist()
    with stage("detector"):
        tc = TrainConfig(det["epochs"], det["batch_size"], det["learning_rate"],
                         det["momentum"], cfg.seed("detector"))
        return train_detector(ds, tc)


# -- evaluation -------------------------------------------------------------

def stream_checkpoints(vals: np.ndarray, cfg: ExperimentConfig, window: int, rng) -> np.ndarray:
    cp = cfg["checkpoints"]
    if cp["mode"] == "stride":
        return checkpoint_features(vals, 0, window, stride=cp["stride"])
    return checkpoint_features(vals, cp["eval_per_trace"], window, rng)


def make_screener(cfg: ExperimentConfig, shape, window: int) -> Screener:
    sc = cfg["screener"]
    return Screener(shape, theta=sc["theta"], depth=sc["depth"], window=window,
                    canny_params=CannyParams(sc["canny_sigma"], sc["canny_low"], sc["canny_high"]))


def screened_features(stream: QueryTrace, cfg: ExperimentConfig, shape, window: int,
                      rng) -> tuple[np.ndarray, dict]:
    """Run a stream through the screener; HoDS checkpoints over its channels."""
    sc = make_screener(cfg, shape, window)
    mask = stream.attack_mask()
    sus = np.array([sc.push(q).suspicious for q in stream.queries], dtype=bool)
    feats = []
    for cid, vals in sc.channel_ds.items():
        if len(vals) >= window:
            feats.append(stream_checkpoints(np.asarray(vals), cfg, window, rng))
    f = np.concatenate(feats) if feats else np.empty((0, N_BINS))
    if cfg["checkpoints"]["mode"] == "random" and len(f) > cfg["checkpoints"]["eval_per_trace"]:
        f = f[np.sort(rng.choice(len(f), cfg["checkpoints"]["eval_per_trace"], replace=False))]
    stats = {
        "attack_suspicious": float(sus[mask].mean()) if mask.any() else float("nan"),
        "benign_passed": float(1 - sus[~mask].mean()) if (~mask).any() else float("nan"),
        "channels": len(sc.channel_ds),
    }
    return f, stats


def stream_position_of_success(stream: QueryTrace, outcome: AttackOutcome) -> int | None:
    """1-based stream index of the successful attack query, counting injected ones."""
    if outcome.queries_to_success is None:
        return None
    pos = np.flatnonzero(stream.attack_mask())
    return int(pos[outcome.queries_to_success - 1]) + 1


@dataclass
class RunResult:
    method: Method
    pred: np.ndarray
    outcome: AttackOutcome
    stream_q2s: int | None
    profile: dict
    screen: dict | None = None


def evaluate_runs(ws: Workspace, net: Mlp, method: Method, r_b: float, *,
                  pipeline: str | None = None, window: int | None = None,
                  victim: VictimModel | None = None, sources: list[int] | None = None,
                  seed_key: str = "eval_traces", traces=None) -> list[RunResult]:
    cfg = ws.cfg
    pipeline = pipeline or cfg.pipeline
    window = window or cfg.window
    irng = make_rng(cfg.seed("injection"), "eval", method.value, repr(float(r_b)))
    crng = make_rng(cfg.seed("checkpoints"), "eval", method.value, repr(float(r_b)))
    if traces is None:
        traces = attack_runs(ws, method, sources if sources is not None else ws.eval_sources,
                             seed_key, cfg.attack_config(), victim)
    results = []
    for trace, outcome in traces:
        stream = inject_benign(trace, r_b, ws.eval_pool, irng) if r_b else trace
        screen = None
        if pipeline == "GWADPlus":
            with stage("screen"):
                f, screen = screened_features(stream, cfg, ws.test.shape, window, crng)
        else:
            vals, _ = ds_series(stream.queries, window)
            f = stream_checkpoints(vals, cfg, window, crng)
        results.append(RunResult(method, classify(net, f), outcome,
                                 stream_position_of_success(stream, outcome),
                                 consumption_profile(trace), screen))
    return results


def benign_predictions(ws: Workspace, net: Mlp, *, pipeline: str | None = None,
                       window: int | None = None) -> tuple[np.ndarray, dict]:
    cfg = ws.cfg
    pipeline = pipeline or cfg.pipeline
    window = window or cfg.window
    n = cfg["benign_eval"]["streams"]
    rng = make_rng(cfg.seed("benign"), "eval", window)
    if pipeline == "GWADPlus":
        stream = benign_stream(ws.eval_pool, max(n, window + 2), rng)
        f, stats = screened_features(stream, cfg, ws.test.shape, window, rng)
        return classify(net, f), stats
    return classify(net, benign_window_features(ws.eval_pool, n, window, rng)), {}


def evaluate_stream(pred, labels) -> dict:
    """Detection over attack checkpoints, FPR over benign ones, recognition over all."""
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if pred.shape != labels.shape:
        raise ValueError("verdicts and ground truth differ in length")
    ev = evaluate_predictions(labels, pred)
    return {"detection": ev.detection, "false_positive_rate": ev.false_positive_rate,
            "recognition": ev.recognition, "confusion": ev.confusion}


def _mean(xs) -> float:
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else float("nan")


def summarize_runs(runs: list[RunResult]) -> dict:
    pred = np.concatenate([r.pred for r in runs]) if runs else np.empty(0, dtype=np.int64)
    cid = runs[0].method.class_id if runs else 0
    flagged = pred != BENIGN
    prof: dict[str, float] = {}
    for r in runs:
        for k, v in r.profile.items():
            prof[k] = prof.get(k, 0.0) + v / len(runs)
    out = {
        "runs": len(runs),
        "checkpoints": int(len(pred)),
        "detection_rate": float(flagged.mean()) if len(pred) else float("nan"),
        "recognition_rate": float((pred == cid).mean()) if len(pred) else float("nan"),
        # a run is caught when most of its checkpoints are flagged; runs with
        # no full window (e.g. screened out entirely) count as missed
        "per_run_detection": _mean([float(len(r.pred) > 0 and (r.pred != BENIGN).mean() > 0.5)
                                    for r in runs]),
        "runs_without_checkpoints": sum(len(r.pred) == 0 for r in runs),
        "asr": _mean([float(r.outcome.success) for r in runs]),
        "mean_queries_to_success": _mean([r.stream_q2s for r in runs]),
        "mean_rho": _mean([r.outcome.rho for r in runs]),
        "consumption_profile": {k: prof[k] for k in sorted(prof)},
    }
    screens = [r.screen for r in runs if r.screen]
    if screens:
        out["screener"] = {k: _mean([s[k] for s in screens]) for k in sorted(screens[0])}
    return out


# -- top-level operations ---------------------------------------------------

def run_pipeline(cfg: ExperimentConfig, ws: Workspace | None = None,
                 net: Mlp | None = None) -> dict:
    ws = ws or prepare(cfg)
    curve: list[float] = []
    if net is None:
        net, curve = get_detector(ws)
    per_attack, labels, preds = {}, [], []
    with stage("evaluate"):
        for m in cfg.methods:
            runs = evaluate_runs(ws, net, m, cfg["r_b"])
            per_attack[m.value] = summarize_runs(runs)
            for r in runs:
                preds.append(r.pred)
                labels.append(np.full(len(r.pred), m.class_id))
        bpred, bstats = benign_predictions(ws, net)
        preds.append(bpred)
        labels.append(np.zeros(len(bpred), dtype=np.int64))
        pred = np.concatenate(preds)
        lab = np.concatenate(labels)
        ev = evaluate_predictions(lab, pred)
    benign = {"checkpoints": int(len(bpred)),
              "false_positive_rate": float((bpred != BENIGN).mean()) if len(bpred) else float("nan")}
    benign.update(bstats)
    return {
        "pipeline": cfg.pipeline,
        "r_b": cfg["r_b"],
        "window": cfg.window,
        "victim": {"train_accuracy": ws.victim.accuracy(ws.train),
                   "test_accuracy": ws.victim.accuracy(ws.test)},
        "detector": {"final_training_loss": curve[-1] if curve else None,
                     "training_class_counts": ws.extra.get("train_counts", {}).get(cfg.window)},
        "attacks": per_attack,
        "benign": benign,
        "overall": {"recognition": ev.recognition, "detection": ev.detection,
                    "false_positive_rate": ev.false_positive_rate,
                    "checkpoints": int(len(pred))},
        "confusion": {"classes": list(CLASS_NAMES), "matrix": ev.confusion.tolist()},
    }


def injection_sweep(cfg: ExperimentConfig, r_b_values=None, ws: Workspace | None = None,
                    net: Mlp | None = None, method: Method | str | None = None) -> list[dict]:
    ws = ws or prepare(cfg)
    if net is None:
        net, _ = get_detector(ws)
    method = Method(method or cfg["sweep"]["attack"])
    r_b_values = cfg["sweep"]["r_b_values"] if r_b_values is None else r_b_values
    with stage("traces"):
        traces = list(attack_runs(ws, method, ws.eval_sources, "eval_traces", cfg.attack_config()))
    rows = []
    with stage("evaluate"):
        for r_b in r_b_values:
            s = summarize_runs(evaluate_runs(ws, net, method, float(r_b), traces=traces))
            rows.append({"attack": method.value, "r_b": float(r_b),
                         "detection_rate": s["detection_rate"],
                         "per_run_detection": s["per_run_detection"],
                         "asr": s["asr"],
                         "mean_queries_to_success": s["mean_queries_to_success"]})
    return rows


def ablation_window(cfg: ExperimentConfig, sizes=None, ws: Workspace | None = None) -> list[dict]:
    ws = ws or prepare(cfg)
    sizes = list(cfg["ablation"]["sizes"] if sizes is None else sizes)
    budget = cfg.attack_config().query_budget
    if max(sizes) > budget - 2:
        raise PipelineError("config", f"window {max(sizes)} exceeds what a {budget}-query trace fills")
    with stage("traces"):
        series = training_series(ws)
        evals = {m: list(attack_runs(ws, m, ws.eval_sources, "eval_traces", cfg.attack_config()))
                 for m in cfg.methods}
    rows = []
    for w in sizes:
        net, _ = get_detector(ws, window=w, series=series)
        with stage("evaluate"):
            labels, preds, per = [], [], {}
            for m, traces in evals.items():
                runs = evaluate_runs(ws, net, m, 0.0, window=w, pipeline="GWAD", traces=traces)
                s = summarize_runs(runs)
                per[m.value] = {"recognition_rate": s["recognition_rate"],
                                "detection_rate": s["detection_rate"]}
                for r in runs:
                    preds.append(r.pred)
                    labels.append(np.full(len(r.pred), m.class_id))
            ev = evaluate_predictions(np.concatenate(labels), np.concatenate(preds))
        rows.append({"window": w, "recognition": ev.recognition, "detection": ev.detection,
                     "per_attack": per})
    return rows


def ds_histogram(values, bins: int = 40) -> list[dict]:
    counts, edges = np.histogram(np.asarray(values), bins=bins, range=(-1.0, 1.0))
    return [{"lo": float(edges[i]), "hi": float(edges[i + 1]), "count": int(counts[i])}
            for i in range(bins)]


def cross_victim(ws: Workspace, net: Mlp) -> dict:
    """Detection on traces against an independently seeded victim."""
    cfg = ws.cfg
    with stage("victim"):
        other = make_victim(cfg, ws.train, "victim_b")
    with stage("traces"):
        srcs = pick_sources([other], ws.test, cfg["eval_traces_per_attack"],
                            make_rng(cfg.seed("victim_b"), "sources"),
                            exclude=set(ws.train_sources))
    out = {"test_accuracy": other.accuracy(ws.test), "attacks": {}}
    with stage("evaluate"):
        for m in cfg.methods:
            runs = evaluate_runs(ws, net, m, 0.0, pipeline="GWAD", victim=other,
                                 sources=srcs, seed_key="victim_b")
            out["attacks"][m.value] = summarize_runs(runs)
    return out
