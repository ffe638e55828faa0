"""Train the HoDS classifier and watch it name attacks from their histograms.

A reduced version of the full `gwad run` experiment: fewer traces, a shorter
budget and a 128-query window, so it finishes in about a minute.

    python3 demos/detect_attacks.py
"""
import numpy as np

from gwad.detector import CLASS_NAMES
from gwad.harness import pipeline as pl
from gwad.harness.config import ExperimentConfig

cfg = ExperimentConfig({
    "seed": 7,
    "data": {"n_per_class": 100},
    "attack": {"query_budget": 1000},
    "window": 128,
    "train_traces_per_attack": 4,
    "eval_traces_per_attack": 2,
    "checkpoints": {"train_per_trace": 120, "eval_per_trace": 200},
    "detector": {"epochs": 30, "benign_streams": 500},
    "benign_eval": {"streams": 500},
})

ws = pl.prepare(cfg)
print(f"victim test accuracy {ws.victim.accuracy(ws.test):.3f}")
net, curve = pl.get_detector(ws)
print(f"detector trained: loss {curve[0]:.3f} -> {curve[-1]:.4f}\n")

rep = pl.run_pipeline(cfg, ws, net)
print(f"{'attack':9s} {'detected':>9s} {'named':>7s} {'ASR':>5s}")
for name, s in rep["attacks"].items():
    print(f"{name:9s} {s['detection_rate']:9.3f} {s['recognition_rate']:7.3f} {s['asr']:5.2f}")
print(f"\nbenign false positives: {rep['benign']['false_positive_rate']:.4f} "
      f"over {rep['benign']['checkpoints']} windows")

cm = np.array(rep["confusion"]["matrix"])
print("\nconfusion (rows true, columns predicted):")
print("         " + " ".join(f"{c[:6]:>6s}" for c in CLASS_NAMES))
for c, row in zip(CLASS_NAMES, cm):
    print(f"{c:8s} " + " ".join(f"{v:6d}" for v in row))
