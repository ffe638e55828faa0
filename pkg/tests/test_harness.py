import json

import numpy as np
import pytest

from gwad.detector import classify
from gwad.harness import pipeline as pl
from gwad.harness.cli import main
from gwad.harness.config import ConfigError, ExperimentConfig, load_config
from gwad.harness.report import emit_report, load_report, make_report, to_csv, ATTACK_METRICS
from gwad.lab import Method
from gwad.monitor import ds_series, hods_from_values

TINY = {
    "seed": 3,
    "data": {"n_per_class": 60, "d": 3072},
    "attack": {"query_budget": 600},
    "window": 64,
    "train_traces_per_attack": 2, "eval_traces_per_attack": 1,
    "checkpoints": {"train_per_trace": 40, "eval_per_trace": 50},
    "detector": {"epochs": 5, "benign_per_dist": 20, "benign_streams": 40},
    "benign_eval": {"streams": 40},
    "sweep": {"r_b_values": [0.0, 1.0]},
    "ablation": {"sizes": [16, 64]},
}


@pytest.fixture(scope="module")
def tiny():
    cfg = ExperimentConfig(TINY)
    ws = pl.prepare(cfg)
    net, curve = pl.get_detector(ws)
    return cfg, ws, net


# -- config -------------------------------------------------------------------

def test_defaults_are_explicit_and_valid():
    cfg = ExperimentConfig({})
    assert cfg.window == 256 and cfg["checkpoints"]["eval_per_trace"] == 500
    assert cfg["detector"]["learning_rate"] == 0.01 and cfg["detector"]["batch_size"] == 128
    assert set(cfg.all_seeds()) >= {"data", "victim", "detector"}


@pytest.mark.parametrize("raw", [
    {"pipeline": "Other"}, {"seed": -1}, {"bogus": 1}, {"attacks": ["XYZ"]},
    {"attacks": []}, {"window": 1}, {"window": 3000}, {"r_b": -0.5},
    {"checkpoints": {"mode": "sometimes"}}, {"screener": {"theta": 1.5}},
    {"victim": {"weights": "missing.gwnn"}}, {"seeds": {"victim": -2}},
    {"attack": {"query_budget": 0}}, {"data": 3},
])
def test_bad_configs_rejected(raw):
    with pytest.raises(ConfigError):
        ExperimentConfig(raw)


def test_seed_derivation_and_overrides():
    a = ExperimentConfig({"seed": 1})
    b = ExperimentConfig({"seed": 2})
    assert a.seed("victim") != b.seed("victim")
    assert a.seed("victim") != a.seed("data")
    c = ExperimentConfig({"seed": 1, "seeds": {"victim": 77}})
    assert c.seed("victim") == 77 and c.seed("data") == a.seed("data")


def test_hash_ignores_output_location():
    a = ExperimentConfig({"output": {"dir": "x"}})
    b = ExperimentConfig({"output": {"dir": "y"}})
    assert a.hash() == b.hash() != ExperimentConfig({"seed": 9}).hash()


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


# -- evaluate_stream ----------------------------------------------------------

def test_evaluate_stream_trivial_cases():
    labels = np.array([0, 0, 2, 2, 5])
    r = pl.evaluate_stream(labels, labels)
    assert r["detection"] == 1.0 and r["false_positive_rate"] == 0.0
    r = pl.evaluate_stream(np.zeros(5, dtype=int), labels)
    assert r["detection"] == 0.0
    with pytest.raises(ValueError):
        pl.evaluate_stream([0, 1], [0])


def test_evaluate_stream_hand_fixture():
    truth = [0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 4, 5, 6, 6]
    pred = [0, 0, 0, 0, 0, 0, 1, 2, 1, 1, 0, 2, 3, 2, 3, 3, 4, 5, 0, 6]
    r = pl.evaluate_stream(pred, truth)
    # 12 attack samples, 2 predicted benign; 8 benign samples, 2 flagged;
    # correct: 6 benign + 2 NES + 2 HSJA + 2 SimBA + SignOpt + SignFlip + BA = 15
    assert r["detection"] == pytest.approx(10 / 12)
    assert r["false_positive_rate"] == pytest.approx(2 / 8)
    assert r["recognition"] == pytest.approx(15 / 20)
    cm = r["confusion"]
    assert cm.sum() == 20 and cm[0, 0] == 6 and cm[1, 0] == 1 and cm[2, 3] == 1


# -- reports ------------------------------------------------------------------

def _fake_run_body():
    stats = {m: 0.5 for m in ATTACK_METRICS}
    return {"attacks": {"NES": dict(stats), "HSJA": dict(stats, asr=float("nan"))}}


def test_report_json_roundtrip(tmp_path):
    cfg = ExperimentConfig({"seed": 4})
    rep = make_report(cfg, "run", {"attacks": {"NES": {"detection_rate": 0.1 + 0.2}}})
    path = emit_report(rep, tmp_path / "r.json")
    back = load_report(path)
    assert back["result"]["attacks"]["NES"]["detection_rate"] == 0.1 + 0.2
    assert back["config_hash"] == cfg.hash()
    assert back["seeds"] == cfg.all_seeds()


def test_report_csv_rows():
    rep = make_report(ExperimentConfig({}), "run", _fake_run_body())
    lines = to_csv(rep).strip().split("\n")
    assert len(lines) - 1 == 2 * len(ATTACK_METRICS)
    assert all(line.startswith(ExperimentConfig({}).hash()) for line in lines[1:])


# -- pipeline -----------------------------------------------------------------

def test_run_report_reconciles(tiny):
    cfg, ws, net = tiny
    rep = pl.run_pipeline(cfg, ws, net)
    cm = np.array(rep["confusion"]["matrix"])
    assert cm.sum() == rep["overall"]["checkpoints"]
    per = sum(a["checkpoints"] for a in rep["attacks"].values())
    assert per + rep["benign"]["checkpoints"] == cm.sum()
    for a in rep["attacks"].values():
        for k in ("detection_rate", "recognition_rate", "asr"):
            assert 0 <= a[k] <= 1
        assert sum(a["consumption_profile"].values()) == pytest.approx(1.0)


def test_sweep_zero_point_equals_baseline(tiny):
    cfg, ws, net = tiny
    base = pl.run_pipeline(cfg.with_overrides(attacks=["HSJA"]), ws, net)
    rows = pl.injection_sweep(cfg, [0.0], ws, net, method="HSJA")
    assert rows[0]["detection_rate"] == base["attacks"]["HSJA"]["detection_rate"]
    assert rows[0]["mean_queries_to_success"] == base["attacks"]["HSJA"]["mean_queries_to_success"]


def test_ablation_single_size_and_capacity(tiny):
    cfg, ws, _ = tiny
    small = cfg.with_overrides(attacks=["HSJA"])
    rows = pl.ablation_window(small, [64], ws)
    assert len(rows) == 1 and rows[0]["window"] == 64
    with pytest.raises(pl.PipelineError):
        pl.ablation_window(small, [10000], ws)


@pytest.mark.parametrize("method", [Method.HSJA, Method.SIGN_OPT, Method.BA])
def test_gwad_and_gwadplus_agree_on_pure_attack(tiny, method):
    cfg, ws, net = tiny
    w = cfg.window
    (trace, _), = pl.attack_runs(ws, method, ws.eval_sources[:1], "eval_traces",
                                 cfg.attack_config())
    vals, idx = ds_series(trace.queries, w)
    sc = pl.make_screener(cfg, ws.test.shape, w)
    for q in trace.queries:
        sc.push(q)
    where = {p: (cid, k) for cid, pos in sc.channel_pos.items() for k, p in enumerate(pos)}
    plain, screened = [], []
    for j in range(w - 1, len(vals)):
        cid, k = where.get(int(idx[j]), (None, -1))
        if k < w - 1:
            continue
        plain.append(hods_from_values(vals[j - w + 1:j + 1]))
        screened.append(hods_from_values(np.asarray(sc.channel_ds[cid][k - w + 1:k + 1])))
    assert len(plain) >= 100
    agree = np.mean(classify(net, np.array(plain)) == classify(net, np.array(screened)))
    assert agree >= 0.99


# -- CLI ----------------------------------------------------------------------

def _write_cfg(tmp_path, **over):
    raw = json.loads(json.dumps(TINY))
    raw.update(over)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(raw))
    return p


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"window": 1}))
    assert main(["run", "--config", str(bad)]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["run", "--seed", "-4"]) == 1
    # a stage failure: the report input does not exist
    assert main(["report", "--input", str(tmp_path / "none.json"),
                 "--out", str(tmp_path)]) == 2


def test_cli_run_deterministic(tmp_path):
    cfg = _write_cfg(tmp_path, attacks=["HSJA", "NES"])
    assert main(["run", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "report.json").read_bytes()
    assert a == (tmp_path / "b" / "report.json").read_bytes()
    rep = json.loads(a)
    assert rep["config"]["seed"] == 5
    assert main(["report", "--input", str(tmp_path / "a" / "report.json"), "--format", "csv",
                 "--out", str(tmp_path / "c")]) == 0
    rows = (tmp_path / "c" / "report.csv").read_text().strip().split("\n")
    assert len(rows) - 1 == 2 * len(ATTACK_METRICS)


def test_cli_trace_and_dataset_commands(tmp_path):
    cfg = str(_write_cfg(tmp_path))
    out = tmp_path / "o"
    assert main(["gen-traces", "--config", cfg, "--out", str(out),
                 "--attacks", "HSJA", "--n", "1"]) == 0
    traces = sorted((out / "traces").glob("*.gwtr"))
    assert len(traces) == 1
    assert main(["build-dataset", "--config", cfg, "--out", str(out),
                 "--traces", str(out / "traces")]) == 0
    assert main(["train-detector", "--config", cfg, "--out", str(out),
                 "--dataset", str(out / "dataset.csv")]) == 0
    assert (out / "detector.gwnn").exists()
    assert main(["ds-hist", "--config", cfg, "--out", str(out),
                 "--trace", str(traces[0])]) == 0
    hist = json.loads((out / f"ds_hist_{traces[0].stem}.json").read_text())
    assert hist["result"]["n"] == 598
