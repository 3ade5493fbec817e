import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avground.errors import TruncatedFileError
from avground.frontend import (
    LOG_FLOOR_VALUE,
    MalformedWavError,
    NotMonoError,
    UnsupportedEncodingError,
    Waveform,
    compute_fbank,
    load_wav,
)


def write_wav(path, pcm, rate=16000, channels=1, width=2):
    with wave.open(str(path), "wb") as f:
        f.setnchannels(channels)
        f.setsampwidth(width)
        f.setframerate(rate)
        f.writeframes(np.asarray(pcm).astype(f"<i{width}").tobytes())


def test_silence_loads_as_zeros(tmp_path):
    p = tmp_path / "sil.wav"
    write_wav(p, np.zeros(16000, dtype=np.int16))
    w = load_wav(p)
    assert w.sample_rate == 16000
    assert w.samples.shape == (16000,)
    assert not w.samples.any()


def test_full_scale_square_wave_scaling(tmp_path):
    p = tmp_path / "sq.wav"
    write_wav(p, np.tile([32767, -32768], 50))
    w = load_wav(p)
    assert set(np.unique(w.samples)) == {32767 / 32768, -1.0}


def test_truncated_file_reports_offset(tmp_path):
    p = tmp_path / "cut.wav"
    write_wav(p, np.zeros(1000, dtype=np.int16))
    p.write_bytes(p.read_bytes()[:500])
    with pytest.raises(TruncatedFileError, match="byte offset 500"):
        load_wav(p)


def test_distinct_errors(tmp_path):
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"NOPE" + b"\0" * 40)
    with pytest.raises(MalformedWavError):
        load_wav(bad)
    stereo = tmp_path / "st.wav"
    write_wav(stereo, np.zeros(200, dtype=np.int16), channels=2)
    with pytest.raises(NotMonoError):
        load_wav(stereo)
    pcm8 = tmp_path / "u8.wav"
    write_wav(pcm8, np.zeros(200, dtype=np.int8), width=1)
    with pytest.raises(UnsupportedEncodingError):
        load_wav(pcm8)


def test_fbank_frame_count_one_second():
    fb = compute_fbank(Waveform(np.random.default_rng(0).uniform(-0.5, 0.5, 16000), 16000))
    assert fb.frames.shape == (98, 40)


def test_fbank_silence_hits_floor():
    fb = compute_fbank(Waveform(np.zeros(8000), 16000))
    np.testing.assert_array_equal(fb.frames, LOG_FLOOR_VALUE)


def test_fbank_rejects_short_waveform():
    with pytest.raises(ValueError, match="shorter"):
        compute_fbank(Waveform(np.zeros(399), 16000))


def test_sine_peaks_in_nearest_mel_bin():
    sr, f0 = 16000, 1000.0
    t = np.arange(sr) / sr
    fb = compute_fbank(Waveform(0.5 * np.sin(2 * np.pi * f0 * t), sr))
    # independent recomputation of the 40 HTK-Mel centre frequencies
    mel_max = 2595 * np.log10(1 + 8000 / 700)
    centres_mel = [mel_max * (i + 1) / 41 for i in range(40)]
    centres_hz = [700 * (10 ** (m / 2595) - 1) for m in centres_mel]
    expected = int(np.argmin([abs(c - f0) for c in centres_hz]))
    peaks = fb.frames.argmax(axis=1)
    assert np.all(peaks == expected)


def test_normalize_flag():
    w = Waveform(np.random.default_rng(1).uniform(-0.3, 0.3, 4000), 16000)
    fb = compute_fbank(w, normalize=True)
    np.testing.assert_allclose(fb.frames.mean(axis=0), 0, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(400, 6000))
def test_frame_count_depends_only_on_length(n):
    fb = compute_fbank(Waveform(np.random.default_rng(n).uniform(-1, 1, n), 16000))
    assert fb.num_frames == (n - 400) // 160 + 1


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(1.0001, 20.0))
def test_scaling_up_never_decreases_energy(seed, c):
    x = np.random.default_rng(seed).uniform(-0.05, 0.05, 1200)
    a = compute_fbank(Waveform(x, 16000)).frames
    b = compute_fbank(Waveform(c * x, 16000)).frames
    assert np.all(b >= a - 1e-12)
