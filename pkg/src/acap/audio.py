"""WAV input, log-mel features, SpecAugment, and the MELS feature dump."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from scipy.io import wavfile

PathLike = Union[str, Path]


class AudioFormatError(ValueError):
    pass


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 44100
    n_fft: int = 1024
    hop: int = 512
    n_mels: int = 64
    center_pad: bool = True
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.hop > self.n_fft:
            raise ValueError("hop must not exceed n_fft")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")


@dataclass(frozen=True)
class SpecAugmentConfig:
    n_time_masks: int = 2
    max_time_width_frames: int = 64
    n_freq_masks: int = 2
    max_freq_width_bins: int = 8
    fill_value: float = 0.0


@dataclass
class Spectrogram:
    frames: np.ndarray  # (n_frames, n_mels) natural-log mel power
    source_duration_s: float = 0.0

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def load_wav(path: PathLike, expected_rate: int = None) -> Tuple[np.ndarray, int]:
    """Read a PCM16 / PCM32 / float32 WAV as mono float64 samples in [-1, 1]."""
    try:
        rate, data = wavfile.read(str(path))
    except FileNotFoundError:
        raise
    except (ValueError, struct.error, EOFError) as exc:
        raise AudioFormatError(f"{path}: cannot parse WAV header ({exc})") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported sample format {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if expected_rate is not None and rate != expected_rate:
        raise AudioFormatError(
            f"{path}: sample rate {rate} Hz differs from configured {expected_rate} Hz (resample unsupported)"
        )
    return x, int(rate)


def write_wav_pcm16(path: PathLike, samples: np.ndarray, sample_rate: int) -> None:
    """Write mono float samples as 16-bit PCM (clipped to the int16 range)."""
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2.0), cfg.n_mels + 2))
    return edges[1:-1]


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """(n_mels, n_fft//2 + 1) triangular HTK-mel filters, unnormalised."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2.0), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def n_frames_for(n_samples: int, cfg: MelConfig) -> int:
    if cfg.center_pad:
        return 1 + n_samples // cfg.hop
    return 1 + (n_samples - cfg.n_fft) // cfg.hop


def logmel(waveform: np.ndarray, cfg: MelConfig = MelConfig()) -> Spectrogram:
    """Hann-window STFT power -> mel filterbank -> ln(x + log_floor)."""
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("waveform must be mono")
    if len(x) < cfg.hop:
        raise ValueError(f"waveform of {len(x)} samples is shorter than one hop ({cfg.hop})")
    if cfg.center_pad:
        x = np.pad(x, cfg.n_fft // 2, mode="reflect")
    elif len(x) < cfg.n_fft:
        raise ValueError("waveform shorter than one FFT window")
    n = 1 + (len(x) - cfg.n_fft) // cfg.hop
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.n_fft)[:: cfg.hop][:n]
    window = np.hanning(cfg.n_fft + 1)[:-1]  # periodic Hann
    power = np.abs(np.fft.rfft(frames * window, axis=1)) ** 2
    mel = power @ mel_filterbank(cfg).T
    return Spectrogram(frames=np.log(mel + cfg.log_floor), source_duration_s=len(waveform) / cfg.sample_rate)


def spec_augment(spec: Spectrogram, cfg: SpecAugmentConfig, rng: np.random.Generator) -> Spectrogram:
    """Fill random contiguous time and frequency bands with ``fill_value``.

    Widths are drawn uniformly from [0, max] (clipped to the axis length) and
    band starts uniformly over the positions where the band fits.
    """
    out = spec.frames.copy()
    n_t, n_f = out.shape
    for axis, count, max_w, size in (
        (0, cfg.n_time_masks, cfg.max_time_width_frames, n_t),
        (1, cfg.n_freq_masks, cfg.max_freq_width_bins, n_f),
    ):
        for _ in range(count):
            w = int(rng.integers(0, min(max_w, size) + 1))
            start = int(rng.integers(0, size - w + 1))
            if axis == 0:
                out[start : start + w, :] = cfg.fill_value
            else:
                out[:, start : start + w] = cfg.fill_value
    return Spectrogram(frames=out, source_duration_s=spec.source_duration_s)


MELS_MAGIC = b"MELS"
MELS_VERSION = 1


def write_mels(path: PathLike, spec: Spectrogram) -> None:
    frames = np.ascontiguousarray(spec.frames, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MELS_MAGIC + struct.pack("<III", MELS_VERSION, *frames.shape))
        fh.write(frames.tobytes())


def read_mels(path: PathLike) -> Spectrogram:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MELS_MAGIC:
        raise AudioFormatError(f"{path}: not a MELS feature file")
    version, n_frames, n_mels = struct.unpack("<III", raw[4:16])
    if version != MELS_VERSION:
        raise AudioFormatError(f"{path}: unsupported MELS version {version}")
    body = raw[16:]
    if len(body) != 8 * n_frames * n_mels:
        raise AudioFormatError(f"{path}: payload size does not match {n_frames}x{n_mels}")
    return Spectrogram(frames=np.frombuffer(body, dtype="<f8").reshape(n_frames, n_mels).astype(np.float64))
