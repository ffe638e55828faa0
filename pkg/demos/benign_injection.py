"""Hiding an attack in benign traffic, and pulling it back out.

An attacker can dilute the DS histogram by mixing ordinary images into the
query stream. The plain monitor loses the attack once benign queries
dominate; the edge-signature screener sends only near-duplicate queries to
the monitor, so the attack reappears.

    python3 demos/benign_injection.py
"""
from gwad.harness import pipeline as pl
from gwad.harness.config import ExperimentConfig
from gwad.lab import Method

cfg = ExperimentConfig({
    "seed": 11,
    "data": {"n_per_class": 100},
    "attack": {"query_budget": 1000},
    "window": 128,
    "train_traces_per_attack": 4,
    "eval_traces_per_attack": 2,
    "checkpoints": {"train_per_trace": 120, "eval_per_trace": 200},
    "detector": {"epochs": 30, "benign_streams": 500},
})
ws = pl.prepare(cfg)
net, _ = pl.get_detector(ws)
traces = list(pl.attack_runs(ws, Method.HSJA, ws.eval_sources, "eval_traces",
                             cfg.attack_config()))

print(f"{'r_b':>5s} {'plain':>7s} {'screened':>9s} {'queries to success':>19s}")
for r_b in (0.0, 1.0, 3.0, 10.0):
    plain = pl.summarize_runs(pl.evaluate_runs(ws, net, Method.HSJA, r_b, pipeline="GWAD",
                                               traces=traces))
    plus = pl.summarize_runs(pl.evaluate_runs(ws, net, Method.HSJA, r_b, pipeline="GWADPlus",
                                              traces=traces))
    print(f"{r_b:5.1f} {plain['detection_rate']:7.3f} {plus['detection_rate']:9.3f} "
          f"{plain['mean_queries_to_success']:19.0f}")
    if r_b == 10.0:
        s = plus["screener"]
        print(f"\nat r_b=10 the screener flagged {s['attack_suspicious']:.1%} of attack queries "
              f"and let {s['benign_passed']:.1%} of benign ones through")
