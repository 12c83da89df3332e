"""Log-Mel front end: STFT -> triangular mel filterbank -> log, then fixed-size segments."""
from __future__ import annotations

import csv
import struct
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    speaker_id: str = ""
    label: int | None = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise InputError("clip must be a non-empty 1-D sample array")
        if int(self.sample_rate) <= 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    mel_bins: int = 64
    segment_seconds: float = 2.0
    log_offset: float = 1e-6
    fmin: float = 0.0
    fmax: float | None = None
    n_fft: int | None = None  # defaults to the smallest power of two >= 2 * window
    window: str = "hann"
    normalize: bool = False

    def __post_init__(self):
        if not self.window_ms >= self.hop_ms > 0:
            raise ConfigError("need window_ms >= hop_ms > 0")
        if self.mel_bins < 1:
            raise ConfigError("mel_bins must be >= 1")
        if not self.fmin < self.upper_hz <= self.sample_rate / 2:
            raise ConfigError("need fmin < fmax <= sample_rate / 2")
        if self.log_offset <= 0:
            raise ConfigError("log_offset must be positive")
        if self.window not in ("hann", "hamming", "rect"):
            raise ConfigError(f"unknown window {self.window!r}")
        if self.fft_size < self.window_length:
            raise ConfigError("n_fft shorter than the analysis window")

    @property
    def upper_hz(self) -> float:
        return self.sample_rate / 2 if self.fmax is None else self.fmax

    @property
    def window_length(self) -> int:
        return int(round(self.window_ms * self.sample_rate / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000))

    @property
    def fft_size(self) -> int:
        if self.n_fft is not None:
            return self.n_fft
        return 1 << int(np.ceil(np.log2(2 * self.window_length)))

    def frame_count(self, num_samples: int) -> int:
        n = max(num_samples, self.window_length)
        return (n - self.window_length) // self.hop_length + 1

    @property
    def segment_frames(self) -> int:
        return self.frame_count(int(round(self.segment_seconds * self.sample_rate)))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(cfg: FeatureConfig) -> np.ndarray:
    """Center frequencies (Hz) of the triangular filters."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.upper_hz), cfg.mel_bins + 2))
    return edges[1:-1]


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """(mel_bins, n_fft // 2 + 1) triangular filters, each row summing to 1."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.upper_hz), cfg.mel_bins + 2))
    freqs = np.fft.rfftfreq(cfg.fft_size, d=1.0 / cfg.sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.clip(np.minimum(rising, falling), 0.0, None)
    sums = fb.sum(axis=1, keepdims=True)
    if np.any(sums == 0):
        raise ConfigError("some mel filters contain no FFT bin; raise n_fft or lower mel_bins")
    return fb / sums


def _window(cfg: FeatureConfig) -> np.ndarray:
    n = cfg.window_length
    if cfg.window == "hann":
        return np.hanning(n + 1)[:-1]  # periodic
    if cfg.window == "hamming":
        return np.hamming(n + 1)[:-1]
    return np.ones(n)


def compute_logmel(clip: AudioClip, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Frames x mel_bins log-Mel energies of a whole clip."""
    if clip.sample_rate != cfg.sample_rate:
        raise InputError(f"sample rate {clip.sample_rate} != configured {cfg.sample_rate}")
    x = clip.samples
    if not np.isfinite(x).all():
        raise InputError("clip contains non-finite samples")
    win = cfg.window_length
    if x.size < win:
        x = np.pad(x, (0, win - x.size))
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[:: cfg.hop_length]
    spec = np.fft.rfft(frames * _window(cfg), n=cfg.fft_size, axis=-1)
    power = spec.real**2 + spec.imag**2
    return np.log(power @ mel_filterbank(cfg).T + cfg.log_offset)


def segment(frames: np.ndarray, cfg: FeatureConfig = FeatureConfig()) -> list[np.ndarray]:
    """Split into non-overlapping fixed-length segments.

    Short inputs are zero-padded to one segment; otherwise the trailing
    remainder is dropped.
    """
    frames = np.asarray(frames)
    if frames.ndim != 2 or len(frames) == 0:
        raise InputError("frames must be a non-empty (frames, mel_bins) array")
    size = cfg.segment_frames
    if len(frames) < size:
        padded = np.zeros((size, frames.shape[1]), dtype=frames.dtype)
        padded[: len(frames)] = frames
        return [padded]
    return [frames[i * size:(i + 1) * size] for i in range(len(frames) // size)]


def normalize(segments: np.ndarray) -> np.ndarray:
    """Mean/variance normalization over a stack of segments (per mel bin)."""
    mu = segments.mean(axis=(0, 1), keepdims=True)
    sd = segments.std(axis=(0, 1), keepdims=True)
    return (segments - mu) / np.maximum(sd, 1e-8)


def utterance_predict(segments: Sequence[np.ndarray], params) -> np.ndarray:
    """Average of per-segment softmax outputs."""
    from .model import predict_proba

    if len(segments) == 0:
        raise InputError("utterance has no segments")
    probs = predict_proba(params, np.stack(segments))
    return probs.astype(np.float64).mean(axis=0)


def extract(clip: AudioClip, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Clip -> (n_segments, segment_frames, mel_bins) float32 stack."""
    segs = np.stack(segment(compute_logmel(clip, cfg), cfg)).astype(np.float32)
    return normalize(segs) if cfg.normalize else segs


# ---------------------------------------------------------------- I/O

def read_wav(path, speaker_id: str = "", label: int | None = None) -> AudioClip:
    """16-bit PCM mono WAV -> clip scaled to [-1, 1)."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise InputError(f"{path}: expected mono, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise InputError(f"{path}: expected 16-bit PCM")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples, rate, speaker_id, label)


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def write_features(path, values: np.ndarray) -> None:
    """Header: frames, mel_bins as little-endian int32; payload: row-major float32."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise InputError("feature record must be 2-D")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<ii", *values.shape))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise InputError(f"{path}: truncated feature header")
    frames, bins = struct.unpack("<ii", buf[:8])
    if frames < 0 or bins < 0 or len(buf) != 8 + 4 * frames * bins:
        raise InputError(f"{path}: payload size does not match header {frames}x{bins}")
    return np.frombuffer(buf[8:], dtype="<f4").reshape(frames, bins).copy()


def dump_features_csv(path, values: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame"] + [f"mel{i}" for i in range(values.shape[1])])
        for i, row in enumerate(values):
            writer.writerow([i] + [f"{v:.6g}" for v in row])
