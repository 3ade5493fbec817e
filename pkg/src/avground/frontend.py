"""Audio ingestion and log-Mel filterbank features."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataFormatError, TruncatedFileError

LOG_FLOOR = 1e-10
LOG_FLOOR_VALUE = float(np.log(LOG_FLOOR))


class MalformedWavError(DataFormatError):
    pass


class UnsupportedEncodingError(DataFormatError):
    pass


class NotMonoError(DataFormatError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # (T, F)
    frame_shift_ms: float = 10.0
    window_ms: float = 25.0
    kind: str = "fbank"

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"feature matrix must be (T>=1, F), got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("feature matrix contains non-finite values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_bins(self) -> int:
        return self.frames.shape[1]


def load_wav(path) -> Waveform:
    """Read a 16-bit PCM mono RIFF/WAVE file, scaling samples by 1/32768."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise TruncatedFileError("file too short for a RIFF header", offset=len(raw))
    if raw[0:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise MalformedWavError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = pos + 8
        if chunk_id == b"fmt ":
            if body + 16 > len(raw):
                raise TruncatedFileError("fmt chunk cut short", offset=len(raw))
            audio_format, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", raw, body)
            fmt = (audio_format, channels, rate, bits)
        elif chunk_id == b"data":
            if fmt is None:
                raise MalformedWavError(f"{path}: data chunk before fmt chunk")
            audio_format, channels, rate, bits = fmt
            if audio_format != 1 or bits != 16:
                raise UnsupportedEncodingError(f"{path}: only 16-bit PCM supported (format {audio_format}, {bits} bits)")
            if channels != 1:
                raise NotMonoError(f"{path}: expected mono, got {channels} channels")
            end = body + size
            if end > len(raw):
                raise TruncatedFileError(f"{path}: data chunk declares {size} bytes but file ends", offset=len(raw))
            if size % 2:
                raise MalformedWavError(f"{path}: odd data chunk size {size}")
            pcm = np.frombuffer(raw, dtype="<i2", count=size // 2, offset=body)
            return Waveform(pcm.astype(np.float64) / 32768.0, rate)
        pos = body + size + (size & 1)
    if fmt is None:
        raise MalformedWavError(f"{path}: no fmt chunk")
    raise TruncatedFileError(f"{path}: no data chunk", offset=len(raw))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular HTK-Mel filters spanning 0 Hz to Nyquist, shape (n_mels, n_fft//2 + 1)."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def num_frames(n_samples: int, window: int, shift: int) -> int:
    return (n_samples - window) // shift + 1


def compute_fbank(
    w: Waveform,
    n_mels: int = 40,
    window_ms: float = 25.0,
    shift_ms: float = 10.0,
    preemphasis: float = 0.97,
    normalize: bool = False,
) -> FeatureMatrix:
    window = int(round(w.sample_rate * window_ms / 1000))
    shift = int(round(w.sample_rate * shift_ms / 1000))
    n = w.samples.size
    if n < window:
        raise ValueError(f"waveform has {n} samples, shorter than one {window}-sample window")
    T = num_frames(n, window, shift)
    frames = sliding_window_view(w.samples, window)[::shift][:T].copy()
    # pre-emphasis within each frame; the first sample is emphasised against itself
    frames[:, 1:] -= preemphasis * frames[:, :-1].copy()
    frames[:, 0] *= 1.0 - preemphasis
    frames *= np.hamming(window)
    n_fft = 1 << (window - 1).bit_length()
    mag = np.abs(np.fft.rfft(frames, n=n_fft, axis=1))
    energies = mag @ mel_filterbank(n_mels, n_fft, w.sample_rate).T
    feats = np.log(np.maximum(energies, LOG_FLOOR))
    if normalize:
        feats = (feats - feats.mean(axis=0)) / np.maximum(feats.std(axis=0), 1e-8)
    return FeatureMatrix(feats, frame_shift_ms=shift_ms, window_ms=window_ms, kind="fbank")
