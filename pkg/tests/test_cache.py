import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from preroute import cache as rc
from preroute.corpus import CorpusSpec, make_corpus
from preroute.grouter import Grouter, GrouterConfig, LiveGrouterRouter, freeze, grouter_forward, shared_route
from preroute.moe import MoeConfig, route
from preroute.training import TrainConfig, train_lm

GCFG = GrouterConfig(num_experts=8, d_model=16, num_heads=2, ffn_hidden=32)


@pytest.fixture(scope="module")
def grouter():
    return freeze(Grouter(GCFG, seed=0))


@pytest.fixture(scope="module")
def corpus():
    return make_corpus(CorpusSpec(seq_len=16), 24, seed=0)


# -- bf16 -------------------------------------------------------------------------------
def test_one_encodes_as_3f80():
    assert rc.f32_to_bf16(1.0) == 0x3F80
    assert rc.bf16_to_f32(np.uint16(0x3F80)) == 1.0


def test_bf16_rounds_to_nearest_even():
    # 1 + 2^-8 sits exactly halfway between 1.0 and the next bf16 value; ties go to even (1.0)
    assert rc.f32_to_bf16(np.float32(1 + 2**-8)) == 0x3F80
    # 1 + 3 * 2^-8 is halfway between odd 0x3F81 and even 0x3F82
    assert rc.f32_to_bf16(np.float32(1 + 3 * 2**-8)) == 0x3F82
    assert rc.f32_to_bf16(np.float32(1 + 2**-8 + 2**-12)) == 0x3F81


def test_bf16_relative_error_bound():
    x = np.random.default_rng(0).standard_normal(10000) * 10
    back = rc.bf16_to_f32(rc.f32_to_bf16(x)).astype(np.float64)
    assert np.max(np.abs(back - x) / np.abs(x)) <= 2.0**-8


# -- header and file size -----------------------------------------------------------------
@pytest.mark.parametrize("E, width", [(8, 1), (256, 1), (257, 2), (65536, 2)])
def test_index_width_and_size_formula(E, width):
    assert rc.index_width_for(E) == width
    h = rc.CacheHeader(E, 2, width, 30, 10)
    assert h.file_size == 24 + 30 * 2 * (width + 2)
    assert len(h.pack()) == 24


def test_too_many_experts_rejected():
    with pytest.raises(ValueError):
        rc.index_width_for(65537)


def test_header_layout_is_little_endian():
    raw = rc.CacheHeader(300, 3, 2, 6, 2).pack()
    assert raw[:4] == b"GRTC"
    assert struct.unpack("<H", raw[4:6])[0] == 1
    assert struct.unpack("<I", raw[6:10])[0] == 300
    assert raw[10] == 3 and raw[11] == 2
    assert struct.unpack("<Q", raw[12:20])[0] == 6
    assert struct.unpack("<I", raw[20:24])[0] == 2


# -- build / round trip -------------------------------------------------------------------
def test_empty_corpus_gives_header_only(grouter, tmp_path):
    c = rc.build_cache(grouter, np.zeros((0, 16), dtype=int), 2)
    c.save(tmp_path / "e.grtc")
    blob = (tmp_path / "e.grtc").read_bytes()
    assert len(blob) == 24 and rc.load(tmp_path / "e.grtc").token_count == 0


def test_round_trip_matches_live_routing(grouter, corpus, tmp_path):
    c = rc.build_cache(grouter, corpus.inputs, 2, batch_size=5)
    c.save(tmp_path / "c.grtc")
    back = rc.load(tmp_path / "c.grtc")
    assert (tmp_path / "c.grtc").stat().st_size == back.header.file_size == 24 + corpus.inputs.size * 2 * 3
    live = grouter_forward(grouter, corpus.inputs).reshape(-1, 8)
    dec = route(live, 2)
    np.testing.assert_array_equal(back.indices, dec.indices)
    chosen = np.take_along_axis(live, dec.indices, axis=1)
    np.testing.assert_array_less(np.abs(back.scores() - chosen), np.abs(chosen) * 2.0**-8 + 1e-300)
    assert back.to_bytes() == c.to_bytes()


def test_replay_first_token_and_repeatability(grouter, corpus):
    c = rc.build_cache(grouter, corpus.inputs, 2)
    d1 = rc.replay(c, [0])
    np.testing.assert_array_equal(d1.indices, c.indices[:1])
    s = c.scores()[0]
    np.testing.assert_allclose(d1.weights[0], np.exp(s) / np.exp(s).sum())
    d2 = rc.replay(c, [0])
    assert d1.weights.tobytes() == d2.weights.tobytes()
    with pytest.raises(IndexError):
        rc.replay(c, [c.token_count])


def test_cache_matches_shared_route(grouter, corpus):
    c = rc.build_cache(grouter, corpus.inputs, 2)
    live = shared_route(grouter, corpus.inputs[3:5], 2)
    dec = rc.CacheRouter(c).decide(np.array([3, 4]), corpus.inputs[3:5])
    np.testing.assert_array_equal(dec.indices, live.indices)
    np.testing.assert_allclose(dec.weights, live.weights, atol=1e-2)


def test_unfrozen_grouter_rejected(corpus):
    with pytest.raises(ValueError):
        rc.build_cache(Grouter(GCFG), corpus.inputs, 2)


def test_replay_training_tracks_live_routing(grouter, corpus):
    cfg = MoeConfig(num_experts=8, top_k=2, seq_len=16, d_model=16, expert_hidden=16)
    tc = TrainConfig(batch_size=4, checkpoint_every=0)
    cache = rc.build_cache(grouter, corpus.inputs, 2)
    a = train_lm(cfg, corpus, "frozen-grouter", 30, seed=3, train=tc, router=rc.CacheRouter(cache))
    b = train_lm(cfg, corpus, "frozen-grouter", 30, seed=3, train=tc, router=LiveGrouterRouter(grouter, 2))
    assert np.max(np.abs(a.losses() - b.losses())) < 1e-3


# -- fuzzing ------------------------------------------------------------------------------
def _valid_blob():
    h = rc.CacheHeader(8, 2, 1, 4, 2)
    return rc.RouteCache(h, np.array([[0, 1], [2, 3], [4, 5], [6, 7]]), np.zeros((4, 2), np.uint16)).to_bytes()


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=80))
def test_random_bytes_never_crash(blob):
    try:
        rc.from_bytes(blob)
    except rc.CacheFormatError:
        pass


@settings(max_examples=300, deadline=None)
@given(
    version=st.integers(0, 3),
    E=st.integers(0, 70000),
    k=st.integers(0, 255),
    width=st.integers(0, 255),
    count=st.integers(0, 2**64 - 1),
    seq=st.integers(0, 2**32 - 1),
    body=st.binary(max_size=64),
)
def test_fuzzed_headers_never_crash(version, E, k, width, count, seq, body):
    blob = rc.HEADER.pack(rc.MAGIC, version, E, k, width, count, seq) + body
    try:
        c = rc.from_bytes(blob)
    except rc.CacheFormatError:
        return
    assert len(blob) == c.header.file_size
    assert c.indices.shape == (count, k)


def test_truncated_and_padded_files_rejected():
    blob = _valid_blob()
    assert rc.from_bytes(blob).token_count == 4
    for bad in (blob[:-1], blob + b"\0", blob[:10]):
        with pytest.raises(rc.CacheFormatError):
            rc.from_bytes(bad)


def test_index_beyond_expert_count_rejected():
    blob = bytearray(_valid_blob())
    blob[24] = 9
    with pytest.raises(rc.CacheFormatError):
        rc.from_bytes(bytes(blob))
