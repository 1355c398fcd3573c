import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile

from acap.audio import (
    AudioFormatError,
    MelConfig,
    SpecAugmentConfig,
    Spectrogram,
    load_wav,
    logmel,
    mel_center_frequencies,
    mel_filterbank,
    n_frames_for,
    read_mels,
    spec_augment,
    write_mels,
    write_wav_pcm16,
)

SR = 44100


def htk_centres(n_mels=64, sr=SR):
    # independent closed form: equally spaced on 2595*log10(1 + f/700)
    top = 2595.0 * math.log10(1.0 + (sr / 2) / 700.0)
    mels = [top * (i + 1) / (n_mels + 1) for i in range(n_mels)]
    return [700.0 * (10 ** (m / 2595.0) - 1.0) for m in mels]


def test_load_silence(tmp_path):
    p = tmp_path / "s.wav"
    wavfile.write(p, SR, np.zeros(SR, dtype=np.int16))
    x, rate = load_wav(p, SR)
    assert rate == SR and x.shape == (SR,) and not x.any()


def test_pcm16_full_scale_square(tmp_path):
    p = tmp_path / "sq.wav"
    sq = np.where(np.arange(1000) % 100 < 50, 32767, -32767).astype(np.int16)
    wavfile.write(p, SR, sq)
    x, _ = load_wav(p)
    assert set(np.unique(x)) == {32767 / 32768, -32767 / 32768}


def test_pcm32_and_float(tmp_path):
    wavfile.write(tmp_path / "a.wav", SR, np.array([2**30, -(2**31)], dtype=np.int32))
    wavfile.write(tmp_path / "b.wav", SR, np.array([0.25, -0.5], dtype=np.float32))
    assert load_wav(tmp_path / "a.wav")[0].tolist() == [0.5, -1.0]
    assert load_wav(tmp_path / "b.wav")[0].tolist() == [0.25, -0.5]


def test_stereo_averaged(tmp_path):
    p = tmp_path / "st.wav"
    wavfile.write(p, SR, np.tile(np.array([[16384, -16384]], dtype=np.int16), (500, 1)))
    x, _ = load_wav(p)
    assert x.shape == (500,) and not x.any()


def test_rate_mismatch(tmp_path):
    p = tmp_path / "r.wav"
    wavfile.write(p, 16000, np.zeros(100, dtype=np.int16))
    with pytest.raises(AudioFormatError, match="resample unsupported"):
        load_wav(p, SR)


def test_malformed_header(tmp_path):
    p = tmp_path / "bad.wav"
    p.write_bytes(b"RIFX\x00\x00\x00\x00garbage")
    with pytest.raises(AudioFormatError):
        load_wav(p)


def test_pcm16_writer_roundtrip(tmp_path):
    x = np.linspace(-0.9, 0.9, 200)
    write_wav_pcm16(tmp_path / "w.wav", x, SR)
    y, _ = load_wav(tmp_path / "w.wav")
    assert np.max(np.abs(y - x)) < 2 / 32768


def test_thirty_seconds_frame_count():
    spec = logmel(np.zeros(30 * SR))
    assert spec.n_frames == 2584 == 1 + 1_323_000 // 512
    assert spec.frames.shape == (2584, 64)
    assert spec.source_duration_s == 30.0


def test_silence_is_log_floor():
    spec = logmel(np.zeros(SR))
    assert np.max(np.abs(spec.frames - math.log(1e-10))) <= 1e-12


def test_sine_peaks_at_nearest_centre():
    t = np.arange(SR) / SR
    spec = logmel(0.5 * np.sin(2 * np.pi * 1000.0 * t))
    centres = htk_centres()
    expected = int(np.argmin([abs(c - 1000.0) for c in centres]))
    assert int(np.argmax(spec.frames[5:-5].mean(axis=0))) == expected


def test_centres_match_independent_formula():
    assert np.allclose(mel_center_frequencies(MelConfig()), htk_centres(), rtol=1e-12)


def test_filterbank_properties():
    fb = mel_filterbank(MelConfig())
    assert fb.shape == (64, 513)
    assert np.all(fb >= 0) and np.all(fb.sum(axis=1) > 0) and np.all(fb <= 1)
    assert np.all(np.diff(mel_center_frequencies(MelConfig())) > 0)


def test_too_short():
    with pytest.raises(ValueError):
        logmel(np.zeros(100))


def test_logmel_deterministic():
    x = np.random.default_rng(0).uniform(-1, 1, 5000)
    assert logmel(x).frames.tobytes() == logmel(x).frames.tobytes()


@settings(max_examples=100, deadline=None)
@given(st.integers(512, 20000))
def test_frame_count_formula(n):
    spec = logmel(np.random.default_rng(n).uniform(-0.1, 0.1, n))
    assert spec.n_frames == 1 + n // 512 == n_frames_for(n, MelConfig())
    assert np.all(np.isfinite(spec.frames)) and np.all(spec.frames >= math.log(1e-10))


def test_specaugment_zero_widths():
    s = Spectrogram(np.random.default_rng(0).standard_normal((50, 64)))
    out = spec_augment(s, SpecAugmentConfig(2, 0, 2, 0), np.random.default_rng(1))
    assert out.frames.tobytes() == s.frames.tobytes()


spec_cfgs = st.builds(
    SpecAugmentConfig,
    st.integers(0, 4),
    st.integers(0, 80),
    st.integers(0, 4),
    st.integers(0, 70),
    st.sampled_from([0.0, -5.0, 1.5]),
)


@settings(max_examples=1000, deadline=None)
@given(spec_cfgs, st.integers(1, 90), st.integers(1, 64), st.integers(0, 2**32 - 1))
def test_specaugment_properties(cfg, n_t, n_f, seed):
    frames = np.random.default_rng(seed).standard_normal((n_t, n_f)) + 10.0
    a = spec_augment(Spectrogram(frames), cfg, np.random.default_rng(seed)).frames
    b = spec_augment(Spectrogram(frames), cfg, np.random.default_rng(seed)).frames
    assert a.shape == frames.shape
    assert a.tobytes() == b.tobytes()
    changed = a != frames
    assert np.all(a[changed] == cfg.fill_value)
    assert np.count_nonzero(a == cfg.fill_value) >= np.count_nonzero(frames == cfg.fill_value)
    # masked cells form full rows / columns
    rows = np.all(a == cfg.fill_value, axis=1)
    cols = np.all(a == cfg.fill_value, axis=0)
    assert np.all(changed <= (rows[:, None] | cols[None, :]))


def test_mels_roundtrip(tmp_path):
    s = logmel(np.random.default_rng(2).uniform(-1, 1, 4000))
    write_mels(tmp_path / "f.mels", s)
    raw = (tmp_path / "f.mels").read_bytes()
    assert raw[:4] == b"MELS" and len(raw) == 16 + 8 * s.frames.size
    assert read_mels(tmp_path / "f.mels").frames.tobytes() == s.frames.tobytes()
    (tmp_path / "g.mels").write_bytes(raw[:-1])
    with pytest.raises(AudioFormatError):
        read_mels(tmp_path / "g.mels")
