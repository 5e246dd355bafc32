"""Waveform I/O, Hann-window magnitude STFT and frame/overlap-add utilities."""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SAMPLE_RATE = 8000
# 160 ms window and 80 ms hop at 8 kHz
STFT_FRAME = 1280
STFT_HOP = 640


class WavFormatError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size < 1:
            raise ValueError("waveform must have at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Spectrogram:
    mags: np.ndarray  # (F, frames)
    frame_len: int
    hop: int
    window: str = field(default="hann")

    @property
    def num_bins(self) -> int:
        return self.mags.shape[0]

    @property
    def num_frames(self) -> int:
        return self.mags.shape[1]


def read_wav(path: str | Path) -> Waveform:
    """Read a 16-bit PCM mono WAV, scaled to [-1, 1) by 1/32768."""
    try:
        with wave.open(str(path), "rb") as f:
            channels = f.getnchannels()
            width = f.getsampwidth()
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except wave.Error as exc:
        raise WavFormatError(f"{path}: malformed header: {exc}") from exc
    except EOFError as exc:
        raise WavFormatError(f"{path}: truncated file") from exc
    if channels != 1:
        raise WavFormatError(f"{path}: channels={channels}, expected mono (1)")
    if width != 2:
        raise WavFormatError(f"{path}: sample width={8 * width} bits, expected 16")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def quantize(samples: np.ndarray) -> np.ndarray:
    """Round to the int16 grid used by :func:`write_wav` (with clipping)."""
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path: str | Path, w: Waveform) -> None:
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(w.sample_rate))
        f.writeframes(quantize(w.samples).tobytes())


def hann_window(n: int) -> np.ndarray:
    """Symmetric Hann window, zero at both ends."""
    if n < 2:
        raise ValueError(f"hann window needs n >= 2, got {n}")
    return np.hanning(n)


def num_frames(length: int, frame_len: int, hop: int) -> int:
    return 1 + (length - frame_len) // hop


def frame_signal(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """(frames, frame_len) matrix of windows starting every ``hop`` samples; the tail is dropped."""
    x = np.asarray(x)
    if hop > frame_len:
        raise ValueError(f"hop {hop} exceeds frame length {frame_len}")
    if hop < 1:
        raise ValueError(f"hop must be >= 1, got {hop}")
    if x.shape[-1] < frame_len:
        raise ValueError(f"signal of length {x.shape[-1]} is shorter than one frame ({frame_len})")
    return sliding_window_view(x, frame_len, axis=-1)[..., ::hop, :].copy()


def overlap_add_signal(frames: np.ndarray, hop: int, normalize: bool = True) -> np.ndarray:
    """Inverse of :func:`frame_signal`; with ``normalize`` each sample is divided by its coverage count."""
    frames = np.asarray(frames)
    n, frame_len = frames.shape[-2], frames.shape[-1]
    if hop > frame_len:
        raise ValueError(f"hop {hop} exceeds frame length {frame_len}")
    length = (n - 1) * hop + frame_len
    out = np.zeros((*frames.shape[:-2], length), dtype=frames.dtype)
    count = np.zeros(length)
    for j in range(n):
        out[..., j * hop : j * hop + frame_len] += frames[..., j, :]
        count[j * hop : j * hop + frame_len] += 1
    return out / count if normalize else out


def stft_mag(w: Waveform | np.ndarray, frame_len: int = STFT_FRAME, hop: int = STFT_HOP) -> Spectrogram:
    """Magnitude STFT with a symmetric Hann window; (frame_len // 2 + 1) bins by frames.

    Callers must zero-pad signals shorter than one frame.
    """
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if x.shape[-1] < frame_len:
        raise ValueError(
            f"signal of length {x.shape[-1]} is shorter than one STFT frame ({frame_len}); zero-pad it first"
        )
    fr = frame_signal(x, frame_len, hop) * hann_window(frame_len)
    mags = np.abs(np.fft.rfft(fr, axis=-1))
    return Spectrogram(np.swapaxes(mags, -1, -2), frame_len, hop)


def pad_to(x: np.ndarray, length: int) -> np.ndarray:
    """Right-pad with zeros to at least ``length`` samples."""
    x = np.asarray(x)
    if x.shape[-1] >= length:
        return x
    return np.pad(x, [(0, 0)] * (x.ndim - 1) + [(0, length - x.shape[-1])])
