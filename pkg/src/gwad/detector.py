"""HoDS attack classifier: dataset construction, training, verdicts and scoring."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .lab.trace import QueryTrace
from .monitor import DEFAULT_WINDOW, N_BINS, ds_series, hods_from_values
from .nn import Mlp, forward, init_mlp, load_weights, save_weights, train_sgd
from .numkit import Rng, make_rng

CLASS_NAMES = ("benign", "NES", "HSJA", "SimBA", "SignOpt", "SignFlip", "BA")
N_CLASSES = len(CLASS_NAMES)
BENIGN = 0
LAYER_SIZES = [N_BINS, 512, 512, 256, 128, 64, N_CLASSES]

# (mean, variance) of the synthetic benign DS distributions
BENIGN_DISTS = ((0.0, 0.25), (-0.5, 0.25), (0.0, 0.14), (-0.5, 0.14))


def synth_benign_hods(n_per_dist: int, window: int, rng: Rng,
                      dists: Sequence[tuple[float, float]] = BENIGN_DISTS) -> np.ndarray:
    """Benign HoDS from DS values drawn i.i.d. from normal fits, clipped to [-1, 1]."""
    if n_per_dist < 1:
        raise ValueError("n_per_dist must be >= 1")
    out = np.empty((len(dists) * n_per_dist, N_BINS))
    k = 0
    for mu, var in dists:
        draws = np.clip(rng.normal(mu, np.sqrt(var), (n_per_dist, window)), -1.0, 1.0)
        for row in draws:
            out[k] = hods_from_values(row)
            k += 1
    return out


@dataclass
class HodsDataset:
    features: np.ndarray      # (n, 201)
    labels: np.ndarray        # (n,) int64
    skipped: int = 0
    run_ids: np.ndarray | None = None   # which trace each feature came from, -1 if none

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64).reshape(-1, N_BINS)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")
        if self.labels.size and not (0 <= self.labels.min() and self.labels.max() < N_CLASSES):
            raise ValueError("label out of range")
        if self.run_ids is None:
            self.run_ids = np.full(len(self.labels), -1, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "HodsDataset":
        return HodsDataset(self.features[idx], self.labels[idx], self.skipped, self.run_ids[idx])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=N_CLASSES)

    @staticmethod
    def concat(parts: Sequence["HodsDataset"]) -> "HodsDataset":
        if not parts:
            return HodsDataset(np.empty((0, N_BINS)), np.empty(0, dtype=np.int64))
        return HodsDataset(np.concatenate([p.features for p in parts]),
                           np.concatenate([p.labels for p in parts]),
                           sum(p.skipped for p in parts),
                           np.concatenate([p.run_ids for p in parts]))


def checkpoint_features(ds_values: np.ndarray, n_checkpoints: int, window: int,
                        rng: Rng | None = None, stride: int | None = None) -> np.ndarray:
    """HoDS at full-window positions of a DS series.

    Positions are ``n_checkpoints`` uniform draws without replacement (all of
    them if fewer exist), or every ``stride``-th full position when a stride is
    given.
    """
    n_full = len(ds_values) - window + 1
    if n_full <= 0:
        return np.empty((0, N_BINS))
    if stride is not None:
        ends = np.arange(window - 1, len(ds_values), stride)
    else:
        k = min(n_checkpoints, n_full)
        ends = np.sort(rng.choice(n_full, size=k, replace=False)) + window - 1
    return np.stack([hods_from_values(ds_values[e - window + 1:e + 1]) for e in ends]) \
        if len(ends) else np.empty((0, N_BINS))


def build_dataset(traces_by_class: Mapping[int, Sequence[QueryTrace]],
                  checkpoints_per_trace: int, window: int, rng: Rng) -> HodsDataset:
    """Replay every trace and cut HoDS features at random full-window checkpoints.

    Traces that never fill the window are skipped and counted in ``skipped``.
    """
    parts = []
    run = 0
    for label in sorted(traces_by_class):
        for trace in traces_by_class[label]:
            feats = np.empty((0, N_BINS))
            if checkpoints_per_trace > 0:
                vals, _ = ds_series(trace.queries, window)
                if len(vals) < window:
                    parts.append(HodsDataset(feats, [], skipped=1))
                    run += 1
                    continue
                feats = checkpoint_features(vals, checkpoints_per_trace, window, rng)
            parts.append(HodsDataset(feats, np.full(len(feats), label),
                                     run_ids=np.full(len(feats), run)))
            run += 1
    return HodsDataset.concat(parts)


def build_from_ds(series_by_class: Mapping[int, Sequence[np.ndarray]],
                  checkpoints_per_trace: int, window: int, rng: Rng) -> HodsDataset:
    """Like :func:`build_dataset` but from precomputed DS series (saves replaying)."""
    parts = []
    run = 0
    for label in sorted(series_by_class):
        for vals in series_by_class[label]:
            if len(vals) < window:
                parts.append(HodsDataset(np.empty((0, N_BINS)), [], skipped=1))
            else:
                f = checkpoint_features(np.asarray(vals), checkpoints_per_trace, window, rng)
                parts.append(HodsDataset(f, np.full(len(f), label), run_ids=np.full(len(f), run)))
            run += 1
    return HodsDataset.concat(parts)


def benign_dataset(n_per_dist: int, window: int, rng: Rng) -> HodsDataset:
    f = synth_benign_hods(n_per_dist, window, rng)
    return HodsDataset(f, np.zeros(len(f), dtype=np.int64))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


def train_detector(ds: HodsDataset, cfg: TrainConfig = TrainConfig()) -> tuple[Mlp, list[float]]:
    if len(np.unique(ds.labels)) < 2:
        raise ValueError("training set needs at least two classes")
    net = init_mlp(LAYER_SIZES, make_rng(cfg.seed, "detector-init"))
    curve = train_sgd(net, ds.features, ds.labels, epochs=cfg.epochs,
                      batch_size=cfg.batch_size, lr=cfg.learning_rate,
                      momentum=cfg.momentum, rng=make_rng(cfg.seed, "detector-shuffle"))
    return net, curve


@dataclass(frozen=True)
class Verdict:
    class_id: int
    log_probs: np.ndarray
    is_attack: bool

    @property
    def name(self) -> str:
        return CLASS_NAMES[self.class_id]


def mlp_forward(net: Mlp, f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != net.sizes[0]:
        raise ValueError(f"feature length {f.shape[-1]}, expected {net.sizes[0]}")
    return forward(net, f).astype(np.float64)


def detect(net: Mlp, f) -> Verdict:
    lp = mlp_forward(net, np.asarray(f).reshape(-1))
    cid = int(np.argmax(lp))   # first maximum, so ties go to the lowest id
    return Verdict(cid, lp, cid != BENIGN)


def classify(net: Mlp, features) -> np.ndarray:
    """Batch counterpart of :func:`detect`: class ids only."""
    features = np.asarray(features)
    if len(features) == 0:
        return np.empty(0, dtype=np.int64)
    return np.argmax(mlp_forward(net, features), axis=1)


@dataclass
class Evaluation:
    confusion: np.ndarray                  # rows: true class, cols: predicted
    recognition: float
    detection: float                       # over attack-labelled samples
    false_positive_rate: float             # over benign-labelled samples
    per_class_recognition: dict[str, float] = field(default_factory=dict)
    per_class_detection: dict[str, float] = field(default_factory=dict)
    per_run_detection: float = float("nan")

    def to_dict(self) -> dict:
        return {"confusion": self.confusion.tolist(), "recognition": self.recognition,
                "detection": self.detection, "false_positive_rate": self.false_positive_rate,
                "per_class_recognition": self.per_class_recognition,
                "per_class_detection": self.per_class_detection,
                "per_run_detection": self.per_run_detection}


def _rate(mask) -> float:
    mask = np.asarray(mask)
    return float(mask.mean()) if mask.size else float("nan")


def evaluate(net: Mlp, ds: HodsDataset) -> Evaluation:
    if len(ds) == 0:
        raise ValueError("empty dataset")
    pred = classify(net, ds.features)
    return evaluate_predictions(ds.labels, pred, ds.run_ids)


def evaluate_predictions(labels, pred, run_ids=None) -> Evaluation:
    labels = np.asarray(labels, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(cm, (labels, pred), 1)
    attack = labels != BENIGN
    flagged = pred != BENIGN
    per_rec, per_det = {}, {}
    for c in np.unique(labels):
        m = labels == c
        per_rec[CLASS_NAMES[c]] = _rate(pred[m] == c)
        if c != BENIGN:
            per_det[CLASS_NAMES[c]] = _rate(flagged[m])
    per_run = float("nan")
    if run_ids is not None:
        # a run counts as detected when the majority of its checkpoints are flagged
        runs = [r for r in np.unique(run_ids[attack]) if r >= 0]
        if runs:
            per_run = float(np.mean([flagged[attack & (run_ids == r)].mean() > 0.5 for r in runs]))
    return Evaluation(cm, _rate(pred == labels), _rate(flagged[attack]),
                      _rate(flagged[~attack]), per_rec, per_det, per_run)


def save_detector(net: Mlp, path) -> None:
    save_weights(net, path)


def load_detector(path) -> Mlp:
    net = load_weights(path, expect_sizes=LAYER_SIZES)
    if not all(np.isfinite(w).all() and np.isfinite(b).all()
               for w, b in zip(net.weights, net.biases)):
        raise ValueError("non-finite parameters in weights file")
    return net


def write_dataset_csv(ds: HodsDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"b{i}" for i in range(N_BINS)] + ["label"])
        for f, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in f] + [int(y)])


def read_dataset_csv(path) -> HodsDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) != N_BINS + 1:
        raise ValueError("expected 201 feature columns plus a label column")
    body = rows[1:]
    if not body:
        return HodsDataset(np.empty((0, N_BINS)), np.empty(0, dtype=np.int64))
    feats = np.array([[float(v) for v in r[:N_BINS]] for r in body])
    labels = np.array([int(r[N_BINS]) for r in body])
    return HodsDataset(feats, labels)
