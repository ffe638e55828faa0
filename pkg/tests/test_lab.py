import numpy as np
import pytest

from conftest import correct_index
from gwad.lab import (AttackConfig, Method, Mode, Phase, PreconditionError, QueryTrace,
                      adapt_vary_mean, adapt_vary_variance, consumption_profile,
                      inject_benign, make_synth_dataset, perturbation_ratio, run_attack,
                      train_victim)
from gwad.lab.trace import (TraceFormatError, _pool_indices, benign_stream, load_sidecar,
                            load_trace, save_trace)
from gwad.monitor import ds_series
from gwad.nn import init_mlp, train_sgd
from gwad.numkit import make_rng


# -- data ---------------------------------------------------------------------

def test_dataset_deterministic_and_balanced():
    a = make_synth_dataset(10, 768, 4, make_rng(0))
    b = make_synth_dataset(10, 768, 4, make_rng(0))
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    assert np.bincount(a.y).tolist() == [10] * 4
    assert a.x.dtype == np.float32 and a.x.min() >= 0 and a.x.max() <= 1
    assert a.shape == (16, 16, 3)


@pytest.mark.parametrize("kw", [dict(d=100), dict(n_classes=1), dict(n_per_class=0)])
def test_dataset_rejects_bad_args(kw):
    args = dict(n_per_class=5, d=768, n_classes=3)
    args.update(kw)
    with pytest.raises(ValueError):
        make_synth_dataset(args["n_per_class"], args["d"], args["n_classes"], make_rng(0))


def test_classes_linearly_separable(small_world):
    train, test = small_world["train"], small_world["test"]
    net = init_mlp([train.d, train.n_classes], make_rng(1))
    train_sgd(net, train.x - 0.5, train.y, epochs=30, batch_size=16, lr=0.05,
              momentum=0.9, rng=make_rng(2))
    acc = np.mean(np.argmax((test.x - 0.5) @ net.weights[0] + net.biases[0], 1) == test.y)
    assert acc >= 0.9


# -- victim -------------------------------------------------------------------

def test_victim_accuracy(small_world):
    assert small_world["victim"].accuracy(small_world["test"]) >= 0.85


def test_untrained_victim_near_chance(small_world):
    v = train_victim(small_world["train"], 0, make_rng(3))
    assert v.accuracy(small_world["test"]) < 0.5


def test_oracle_counts_and_modes(small_world):
    v = small_world["victim"].clone()
    x = small_world["test"].x[0]
    p = v.query(x, Mode.SOFT)
    assert v.query_counter == 1
    assert np.isclose(p.sum(), 1.0)
    assert v.query(x, Mode.HARD) == int(np.argmax(p))
    assert v.query_counter == 2
    v.label_of(x)
    v.accuracy(small_world["test"])
    assert v.query_counter == 2
    with pytest.raises(ValueError):
        v.query(np.zeros(5))


# -- attacks ------------------------------------------------------------------

@pytest.mark.parametrize("method", list(Method))
def test_attack_invariants(small_world, method):
    v = small_world["victim"].clone()
    i = correct_index(small_world)
    x0 = small_world["test"].x[i]
    cfg = AttackConfig(query_budget=600)
    trace, out = run_attack(method, v, x0, cfg, make_rng(4, method.value),
                            label=int(small_world["test"].y[i]))
    assert len(trace) == out.queries_used == v.query_counter
    assert out.queries_used <= cfg.query_budget
    assert trace.queries.min() >= 0 and trace.queries.max() <= 1
    if out.success:
        assert out.queries_to_success == out.queries_used   # stops on success
        adv = trace.queries[out.queries_to_success - 1]
        assert perturbation_ratio(x0, adv) <= cfg.rho_max
        assert v.label_of(adv) != out.original_label


def test_attack_deterministic(small_world):
    x0 = small_world["test"].x[correct_index(small_world)]
    cfg = AttackConfig(query_budget=300)
    a = run_attack(Method.HSJA, small_world["victim"].clone(), x0, cfg, make_rng(5))
    b = run_attack(Method.HSJA, small_world["victim"].clone(), x0, cfg, make_rng(5))
    assert a[0] == b[0]


def test_attack_precondition(small_world):
    v, test = small_world["victim"], small_world["test"]
    i = correct_index(small_world)
    wrong = (int(test.y[i]) + 1) % test.n_classes
    with pytest.raises(PreconditionError):
        run_attack(Method.NES, v.clone(), test.x[i], AttackConfig(query_budget=10),
                   make_rng(0), label=wrong)


def test_simba_changes_one_coordinate(small_world):
    x0 = small_world["test"].x[correct_index(small_world)]
    cfg = AttackConfig(query_budget=200, stop_on_success=False)
    trace, _ = run_attack(Method.SIMBA, small_world["victim"].clone(), x0, cfg, make_rng(6))
    q = trace.queries.astype(np.float64)
    # a probe moves one pixel off the current iterate; after a rejected probe the
    # next one also undoes the previous pixel, so neighbours differ in 1 or 2 pixels
    changed = np.count_nonzero(np.diff(q, axis=0), axis=1)
    assert set(changed.tolist()) <= {1, 2}
    ds, _ = ds_series(q, 256)
    assert np.all(np.isin(np.round(ds, 6), [0.0, -1.0]))


def test_nes_ds_near_minus_one_over_sqrt2(small_world):
    x0 = small_world["test"].x[correct_index(small_world)]
    cfg = AttackConfig(query_budget=400, stop_on_success=False)
    trace, _ = run_attack(Method.NES, small_world["victim"].clone(), x0, cfg, make_rng(7))
    zo = trace.phases == Phase.ZERO_ORDER
    ds, idx = ds_series(trace.queries, 256)
    both = zo[idx] & zo[idx - 1] & zo[idx - 2]
    assert abs(np.median(ds[both]) + 1 / np.sqrt(2)) < 0.02


def test_adaptations_with_neutral_settings_match_base(small_world):
    x0 = small_world["test"].x[correct_index(small_world)]
    base = AttackConfig(query_budget=300)
    ref, _ = run_attack(Method.NES, small_world["victim"].clone(), x0, base, make_rng(8))
    fixed = adapt_vary_variance(base, 1.0).replace(alpha_min=1.0)
    t1, _ = run_attack(Method.NES, small_world["victim"].clone(), x0, fixed, make_rng(8))
    t2, _ = run_attack(Method.NES, small_world["victim"].clone(), x0,
                       adapt_vary_mean(base, 0.0), make_rng(8))
    assert ref == t1 and ref == t2


def test_vary_variance_records_scales(small_world):
    x0 = small_world["test"].x[correct_index(small_world)]
    cfg = adapt_vary_variance(AttackConfig(query_budget=500, stop_on_success=False), 2.0)
    trace, _ = run_attack(Method.NES, small_world["victim"].clone(), x0, cfg, make_rng(9))
    scales = [s for s, _ in trace.noise_history]
    assert len(scales) >= 2 and len(set(scales)) == len(scales)
    assert all(0 <= s <= 2 for s in scales)


def test_adapt_arg_checks():
    with pytest.raises(ValueError):
        adapt_vary_variance(AttackConfig(), 0.0)
    with pytest.raises(ValueError):
        adapt_vary_mean(AttackConfig(), 1.5)
    with pytest.raises(ValueError):
        AttackConfig(query_budget=0)


def test_perturbation_ratio():
    assert perturbation_ratio([3.0, 4.0], [3.0, 4.0]) == 0.0
    assert perturbation_ratio([3.0, 4.0], [3.0, 5.0]) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        perturbation_ratio([0.0, 0.0], [1.0, 0.0])


# -- traces -------------------------------------------------------------------

def _toy_trace(n=30, d=8, seed=0):
    r = make_rng(seed)
    return QueryTrace.from_arrays(r.random((n, d)), r.integers(0, 3, n), np.arange(n))


def test_inject_benign_counts_and_order(small_world):
    tr = _toy_trace(40, small_world["test"].d)
    out = inject_benign(tr, 1.5, small_world["test"], make_rng(1))
    assert len(out) == 100
    assert np.sum(out.phases == Phase.INJECTED_BENIGN) == 60
    m = out.attack_mask()
    assert np.array_equal(out.queries[m], tr.queries)
    assert np.array_equal(out.phases[m], tr.phases)
    assert inject_benign(tr, 0.0, small_world["test"], make_rng(1)) == tr
    with pytest.raises(ValueError):
        inject_benign(tr, -1, small_world["test"], make_rng(1))


def test_pool_indices_no_repeat_within_gap():
    idx = _pool_indices(300, 3000, make_rng(2), min_gap=100)
    for i in range(len(idx) - 100):
        assert len(set(idx[i:i + 100].tolist())) == 100


def test_benign_stream(small_world):
    pool = small_world["test"]
    assert len(benign_stream(pool, 0, make_rng(0))) == 0
    a = benign_stream(pool, 50, make_rng(3))
    assert a == benign_stream(pool, 50, make_rng(3))
    ds, _ = ds_series(a.queries, 256)
    assert ds.std() >= 0.2


def test_consumption_profile():
    tr = QueryTrace.from_arrays(np.ones((4, 2)), [0, 0, 1, 3])
    assert consumption_profile(tr) == {"ZERO_ORDER": 0.5, "LINE_SEARCH": 0.25,
                                       "INJECTED_BENIGN": 0.25}
    with pytest.raises(ValueError):
        consumption_profile(QueryTrace(2))


def test_trace_roundtrip(tmp_path):
    tr = _toy_trace()
    path = tmp_path / "t.gwtr"
    save_trace(tr, path, {"method": "NES"})
    assert load_trace(path) == tr
    assert load_sidecar(path) == {"method": "NES"}
    raw = path.read_bytes()
    for name, blob in {"magic": b"ZZZZ" + raw[4:], "short": raw[:-1], "head": raw[:5],
                       "phase": raw[:20] + b"\x09" + raw[21:]}.items():
        (tmp_path / name).write_bytes(blob)
        with pytest.raises(TraceFormatError):
            load_trace(tmp_path / name)
