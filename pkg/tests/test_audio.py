import struct
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cabcnn.audio import (
    AudioClip,
    load_array,
    load_wav,
    max_downsample,
    normalize,
    preprocess,
    read_manifest,
    save_array,
    split_dataset,
    split_sizes,
    synth_corpus,
    truncate,
    write_manifest,
    write_wav,
)
from cabcnn.errors import ConfigError, DegenerateError, WavParseError

from oracles import bucket_max_loop, matched_filter_predict


def _write_pcm16(path, frames: np.ndarray, rate: int):
    frames = np.asarray(frames, dtype="<i2")
    channels = 1 if frames.ndim == 1 else frames.shape[1]
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(frames.tobytes())


# --- WAV --------------------------------------------------------------------

def test_pcm16_scaling(tmp_path):
    path = tmp_path / "c.wav"
    _write_pcm16(path, np.full(16000, 16384), 16000)
    clip = load_wav(path)
    assert clip.sample_rate == 16000
    assert clip.samples.size == 16000
    assert (clip.samples == 0.5).all()


def test_stereo_is_averaged(tmp_path):
    path = tmp_path / "s.wav"
    frames = np.stack([np.full(100, 16384), np.full(100, -8192)], axis=1)
    _write_pcm16(path, frames, 8000)
    np.testing.assert_array_equal(load_wav(path).samples, np.full(100, 0.125))


def test_truncated_data_chunk(tmp_path):
    path = tmp_path / "t.wav"
    _write_pcm16(path, np.arange(1000), 8000)
    raw = path.read_bytes()
    path.write_bytes(raw[:-500])
    with pytest.raises(WavParseError, match=r"expected 2000 bytes, found 1500"):
        load_wav(path)


def test_not_a_wav(tmp_path):
    path = tmp_path / "x.wav"
    path.write_bytes(b"hello world, definitely not RIFF")
    with pytest.raises(WavParseError):
        load_wav(path)


def test_unsupported_codec(tmp_path):
    path = tmp_path / "a.wav"
    fmt = struct.pack("<HHIIHH", 6, 1, 8000, 8000, 1, 8)  # A-law
    data = b"\x00" * 10
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
    with pytest.raises(WavParseError):
        load_wav(path)


def test_missing_wav(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_wav(tmp_path / "nope.wav")


@pytest.mark.parametrize("float32", [False, True])
def test_write_read_round_trip(tmp_path, float32, rng):
    x = rng.uniform(-0.9, 0.9, 500)
    write_wav(tmp_path / "r.wav", x, 8000, float32=float32)
    back = load_wav(tmp_path / "r.wav")
    tol = 1e-7 if float32 else 1 / 32768
    np.testing.assert_allclose(back.samples, x, rtol=0, atol=tol)


# --- normalize ----------------------------------------------------------------

def test_normalize_example():
    np.testing.assert_array_equal(normalize(AudioClip([1.0, 3.0], 8000)).samples, [-1.0, 1.0])


@given(st.integers(0, 2**31), st.floats(-50, 50).filter(lambda a: abs(a) > 1e-3), st.floats(-100, 100))
def test_normalize_affine_invariance(seed, a, b):
    x = np.random.default_rng(seed).standard_normal(64)
    base = normalize(AudioClip(x, 8000)).samples
    moved = normalize(AudioClip(a * x + b, 8000)).samples
    np.testing.assert_allclose(moved, np.sign(a) * base, rtol=0, atol=1e-9)


def test_normalize_two_pass_statistics(rng):
    y = normalize(AudioClip(rng.normal(3.0, 7.0, 10_001), 8000)).samples
    mu = sum(y) / len(y)
    var = sum((v - mu) ** 2 for v in y) / len(y)
    assert abs(mu) < 1e-12
    assert abs(var - 1.0) < 1e-12


def test_normalize_constant_raises():
    with pytest.raises(DegenerateError):
        normalize(AudioClip(np.ones(10), 8000))


# --- max_downsample -----------------------------------------------------------

def test_downsample_8khz_pairs(rng):
    x = rng.standard_normal(8000)
    out = max_downsample(AudioClip(x, 8000))
    assert out.shape == (1, 4000)
    np.testing.assert_array_equal(out[0], np.maximum(x[0::2], x[1::2]))


@pytest.mark.parametrize("rate", [4000, 8000, 16000, 44100])
def test_downsample_constant(rate):
    out = max_downsample(AudioClip(np.full(rate * 2, -0.3), rate))
    assert out.shape == (1, 8000)
    assert (out == -0.3).all()


def test_downsample_44100_oracle(rng):
    x = rng.standard_normal(44100)
    np.testing.assert_array_equal(max_downsample(AudioClip(x, 44100))[0], bucket_max_loop(x, 44100))


@pytest.mark.parametrize("n", [8000 + 3000, 44100 * 2 + 1234, 16000 + 7])
def test_downsample_trailing_second_oracle(n, rng):
    rate = {11000: 8000, 89434: 44100, 16007: 16000}[n]
    x = rng.standard_normal(n)
    out = max_downsample(AudioClip(x, rate))[0]
    np.testing.assert_array_equal(out, bucket_max_loop(x, rate))
    full, rem = divmod(n, rate)
    assert out.size == 4000 * full + min(rem, 4000)


@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_downsample_commutes_with_positive_scaling(seed, a):
    x = np.random.default_rng(seed).standard_normal(16000 + 123)
    np.testing.assert_allclose(
        max_downsample(AudioClip(a * x, 16000)), a * max_downsample(AudioClip(x, 16000)), rtol=1e-15, atol=0
    )


def test_downsample_rejects_low_rate():
    with pytest.raises(ConfigError):
        max_downsample(AudioClip(np.arange(3000.0), 3000))


# --- truncate / pipeline -------------------------------------------------------

@pytest.mark.parametrize("length, expected", [(120_000, 120_000), (240_000, 120_000), (8000, 8000)])
def test_truncate(length, expected):
    assert truncate(np.zeros((1, length)), 30).shape == (1, expected)


def test_truncate_rejects_nonpositive():
    with pytest.raises(ConfigError):
        truncate(np.zeros((1, 10)), 0)


@settings(max_examples=20)
@given(st.floats(1.0, 9.0), st.integers(1, 5), st.sampled_from([8000, 16000, 22050]))
def test_pipeline_length(duration, t_seconds, rate):
    n = int(duration * rate)
    x = np.random.default_rng(n).standard_normal(n)
    out = preprocess(AudioClip(x, rate), t_seconds)
    full, rem = divmod(n, rate)
    assert out.ndim == 1
    assert out.size == min(4000 * full + min(rem, 4000), 4000 * t_seconds)


# --- split ----------------------------------------------------------------------

def _corpus(counts):
    return [(f"c{k}_{i:04d}", k) for k, n in enumerate(counts) for i in range(n)]


def test_split_exact_ratios():
    s = split_dataset(_corpus([100, 100, 100]), 0)
    for label in range(3):
        counts = [sum(1 for _, y in part if y == label) for part in (s.train, s.validation, s.test)]
        assert counts == [60, 10, 30]


def test_split_table_counts():
    s = split_dataset(_corpus([646, 579, 764]), 0)
    for label, n in enumerate([646, 579, 764]):
        got = tuple(sum(1 for _, y in part if y == label) for part in (s.train, s.validation, s.test))
        assert got == split_sizes(n)
    tr, va, _ = split_sizes(646)
    assert tr in (387, 388) and va in (64, 65)
    assert split_sizes(646) == (388, 65, 193)
    assert split_sizes(579) == (347, 58, 174)
    assert split_sizes(764) == (458, 76, 230)


def test_split_is_seeded():
    corpus = _corpus([20, 30])
    assert split_dataset(corpus, 4) == split_dataset(corpus, 4)
    assert split_dataset(corpus, 4).train != split_dataset(corpus, 5).train


@given(st.lists(st.integers(10, 60), min_size=2, max_size=4), st.integers(0, 1000))
def test_split_disjoint_covering_stratified(counts, seed):
    corpus = _corpus(counts)
    s = split_dataset(corpus, seed)
    ids = [i for part in (s.train, s.validation, s.test) for i, _ in part]
    assert sorted(ids) == sorted(i for i, _ in corpus)
    assert len(set(ids)) == len(ids)
    for label, n in enumerate(counts):
        got = tuple(sum(1 for _, y in part if y == label) for part in (s.train, s.validation, s.test))
        assert got == split_sizes(n)


def test_split_too_few():
    with pytest.raises(DegenerateError):
        split_dataset(_corpus([9, 20]), 0)


# --- synthetic corpus -------------------------------------------------------------

def test_synth_durations_and_labels():
    clips = synth_corpus(10, 3, seed=1)
    assert len(clips) == 30
    assert all(2.0 <= c.duration <= 5.0 for c in clips)
    assert [c.label for c in clips] == [0] * 10 + [1] * 10 + [2] * 10


def test_synth_deterministic():
    a, b = synth_corpus(4, 3, seed=2), synth_corpus(4, 3, seed=2)
    for x, y in zip(a, b):
        assert x.samples.tobytes() == y.samples.tobytes()
        assert x.clip_id == y.clip_id


def test_synth_matched_filter_separability():
    clips = synth_corpus(100, 3, seed=0)
    correct = sum(matched_filter_predict(c, 3) == c.label for c in clips)
    assert correct / len(clips) >= 0.99


def test_synth_rejects_empty():
    with pytest.raises(ConfigError):
        synth_corpus(0)


# --- manifests and arrays ----------------------------------------------------------

def test_manifest_round_trip(tmp_path):
    (tmp_path / "sub").mkdir()
    write_manifest(tmp_path / "sub" / "m.csv", [("a.wav", 0), ("/abs/b.wav", 2)])
    rows = read_manifest(tmp_path / "sub" / "m.csv")
    assert rows == [(str(tmp_path / "sub" / "a.wav"), 0), ("/abs/b.wav", 2)]


def test_manifest_missing(tmp_path):
    with pytest.raises(FileNotFoundError, match="manifest not found"):
        read_manifest(tmp_path / "none.csv")


def test_array_round_trip(tmp_path, rng):
    x = rng.standard_normal(1234)
    save_array(tmp_path / "a.f64", x, "clip7", 1)
    back, meta = load_array(tmp_path / "a.f64")
    assert back.tobytes() == x.tobytes()
    assert meta == {"clip_id": "clip7", "label": 1, "length": 1234}
