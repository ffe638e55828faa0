import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import correct_index
from gwad.lab import AttackConfig, Method, run_attack
from gwad.lab.trace import benign_stream
from gwad.numkit import make_rng
from gwad.screener import (SIG_BYTES, CannyParams, Screener, canny, dump_signatures,
                           edge_signature, mismatch_ratio, mismatch_ratios, resize_bilinear,
                           screen_push, screener_channels, to_gray)

SHAPE = (32, 32, 3)


def test_constant_image_has_no_edges():
    sig = edge_signature(np.full(3072, 0.4), SHAPE)
    assert len(sig) == SIG_BYTES == 128
    assert sig == bytes(128)


def test_square_edges_found():
    img = np.zeros((32, 32))
    img[8:24, 8:24] = 1.0
    e = canny(img)
    assert e[8:24, 6:10].any() and not e[14:18, 14:18].any()
    assert not e[:4, :4].any()


def test_gray_weights_and_resize():
    img = np.zeros((2, 2, 3))
    img[..., 1] = 1.0
    assert np.allclose(to_gray(img.reshape(-1), (2, 2, 3)), 0.587)
    g = make_rng(0).random((16, 16))
    assert resize_bilinear(g, 32).shape == (32, 32)
    assert np.array_equal(resize_bilinear(g, 16), g)
    assert np.allclose(resize_bilinear(np.full((16, 16), 0.3)), 0.3)
    with pytest.raises(ValueError):
        to_gray(np.zeros(10), SHAPE)


def test_canny_params_checked():
    with pytest.raises(ValueError):
        CannyParams(low=0.5, high=0.2)


def _sig(bits):
    return np.packbits(np.asarray(bits, dtype=bool)).tobytes()


def test_mismatch_ratio_cases():
    a = _sig([1] * 8 + [0] * 1016)
    b = _sig([1] * 4 + [0] * 1020)
    assert mismatch_ratio(a, a) == 0.0
    assert mismatch_ratio(bytes(128), bytes(128)) == 0.0
    assert mismatch_ratio(a, bytes(128)) == 1.0
    assert mismatch_ratio(a, b) == pytest.approx(4 / 12)
    with pytest.raises(ValueError):
        mismatch_ratio(a, b[:10])


@settings(max_examples=50, deadline=None)
@given(st.binary(min_size=128, max_size=128), st.binary(min_size=128, max_size=128))
def test_mismatch_ratio_symmetric_and_bounded(a, b):
    r = mismatch_ratio(a, b)
    assert r == mismatch_ratio(b, a)
    assert 0.0 <= r <= 1.0
    stack = np.frombuffer(b, dtype=np.uint8)[None, :]
    assert mismatch_ratios(np.frombuffer(a, dtype=np.uint8), stack)[0] == pytest.approx(r)


def test_repeat_query_matches_itself(cifar_world):
    s = Screener(SHAPE)
    x = cifar_world["test"].x[0]
    first = s.push(x)
    assert not first.suspicious and first.best_ratio is None
    again = s.push(x)
    assert again.suspicious and again.best_ratio == 0.0
    assert s.channels() == {again.channel_id: 2}


def test_fifo_is_bounded(cifar_world):
    s = Screener(SHAPE, depth=5)
    pool = cifar_world["test"].x
    s.push(pool[0])
    for x in pool[1:6]:
        s.push(x)
    assert s.fifo_len == 5
    # pool[0] has been evicted, so it can only match if another image looks like it
    v = s.push(pool[0])
    assert not v.suspicious or v.best_ratio > 0


def test_benign_stream_passes(cifar_world):
    s = Screener(SHAPE)
    stream = benign_stream(cifar_world["test"], 400, make_rng(1))
    assert not any(s.push(q).suspicious for q in stream.queries)
    assert s.channels() == {} and screener_channels(s) == {}


def _attack(world, method, k, budget=600):
    v = world["victim"].clone()
    i = correct_index(world, k)
    cfg = AttackConfig(query_budget=budget, stop_on_success=False)
    return run_attack(method, v, world["test"].x[i], cfg, make_rng(20, k))[0]


def test_hsja_queries_flagged(cifar_world):
    tr = _attack(cifar_world, Method.HSJA, 0)
    s = Screener(SHAPE)
    flags = [screen_push(s, q).suspicious for q in tr.queries]
    assert np.mean(flags[1:]) >= 0.99


def test_two_interleaved_attacks_stay_apart(cifar_world):
    a = _attack(cifar_world, Method.HSJA, 0)
    b = _attack(cifar_world, Method.HSJA, 5)
    r = make_rng(21)
    src = np.zeros(len(a) + len(b), dtype=int)
    src[r.choice(len(src), len(b), replace=False)] = 1
    its = [iter(a.queries), iter(b.queries)]
    s = Screener(SHAPE)
    for o in src:
        s.push(next(its[o]))
    pure = total = 0
    for pos in s.channel_pos.values():
        if pos:
            counts = np.bincount(src[pos], minlength=2)
            pure += counts.max()
            total += counts.sum()
    assert pure / total >= 0.99


def test_channel_ds_equals_ds_of_its_subsequence(cifar_world):
    from gwad.monitor import ds_series
    tr = _attack(cifar_world, Method.HSJA, 2, budget=400)
    s = Screener(SHAPE)
    fed = {}
    feed = s._feed

    def spy(cid, q, pos):
        fed.setdefault(cid, []).append(pos)
        feed(cid, q, pos)

    s._feed = spy
    for q in tr.queries:
        s.push(q)
    assert fed
    for cid, positions in fed.items():
        assert positions == sorted(positions)
        vals, idx = ds_series(tr.queries[positions].astype(np.float64), 256)
        assert np.allclose(s.channel_ds[cid], vals, atol=1e-9)
        assert s.channel_pos[cid] == [positions[i] for i in idx]


def test_dump_signatures(tmp_path, cifar_world):
    imgs = cifar_world["test"].x[:3]
    dump_signatures(imgs, SHAPE, tmp_path / "sig.txt")
    lines = (tmp_path / "sig.txt").read_text().split()
    assert lines == [edge_signature(x, SHAPE).hex() for x in imgs]
    assert all(len(line) == 256 for line in lines)
