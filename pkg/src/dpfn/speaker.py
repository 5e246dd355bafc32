"""Speaker module: spectrogram -> residual conv stacks -> mean pooling -> speaker filter.

Also the known-speaker path, where an externally computed embedding (for
instance an x-vector) goes through a trainable linear projection.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .autodiff import Conv1d, LayerNorm, Linear, Module, Tensor
from .autodiff import functional as F
from .signal import STFT_FRAME, STFT_HOP, Spectrogram, Waveform, stft_mag


class FilterSource(str, Enum):
    LEARNED = "learned-from-audio"
    EXTERNAL = "external-embedding"


@dataclass
class SpeakerFilter:
    v: np.ndarray
    source: FilterSource = FilterSource.LEARNED
    speaker_label: str | None = None

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.v)):
            raise ValueError("speaker filter contains non-finite values")

    @property
    def dim(self) -> int:
        return self.v.size


@dataclass
class SpeakerNetConfig:
    n_freq: int | None = None
    stacks: int = 2
    blocks: int = 4
    res_channels: int = 32
    out_channels: int = 32
    filter_dim: int = 16
    kernel_size: int = 3
    entry_kernel: int = 1
    slope: float = 0.01
    frame_len: int = STFT_FRAME
    hop: int = STFT_HOP

    def __post_init__(self):
        expected = self.frame_len // 2 + 1
        if self.n_freq is None:
            self.n_freq = expected
        if self.n_freq != expected:
            raise ValueError(f"n_freq {self.n_freq} does not match frame_len {self.frame_len} ({expected} bins)")
        if self.stacks < 1:
            raise ValueError(f"stacks must be >= 1, got {self.stacks}")
        if self.blocks < 2 or self.blocks % 2:
            raise ValueError(f"blocks must be even and >= 2, got {self.blocks}")
        if self.filter_dim < 1:
            raise ValueError(f"filter_dim must be >= 1, got {self.filter_dim}")
        if self.kernel_size % 2 == 0:
            raise ValueError("residual kernel_size must be odd to preserve the frame count")

    def to_dict(self) -> dict:
        return asdict(self)


class ResidualBlock(Module):
    """LeakyReLU -> same-padded Conv1d -> LayerNorm over channels."""

    def __init__(self, channels: int, kernel_size: int, slope: float, rng: np.random.Generator, dtype=np.float64):
        self.conv = Conv1d(channels, channels, kernel_size, rng, padding=kernel_size // 2, dtype=dtype)
        self.norm = LayerNorm(channels, axis=-2, dtype=dtype)
        self.slope = slope

    def forward(self, y: Tensor) -> Tensor:
        return self.norm(self.conv(F.leaky_relu(y, self.slope)))


class Stack(Module):
    """Entry conv, B residual blocks with a skip spanning every pair, then LeakyReLU."""

    def __init__(self, in_channels: int, cfg: SpeakerNetConfig, rng: np.random.Generator, dtype=np.float64):
        k = cfg.entry_kernel
        self.entry = Conv1d(in_channels, cfg.res_channels, k, rng, padding=(k // 2, (k - 1) // 2), dtype=dtype)
        self.blocks = [ResidualBlock(cfg.res_channels, cfg.kernel_size, cfg.slope, rng, dtype) for _ in range(cfg.blocks)]
        self.slope = cfg.slope

    def forward(self, x: Tensor) -> Tensor:
        y = self.entry(x)
        saved = y
        for j, block in enumerate(self.blocks):
            y = block(y)
            if j % 2 == 1:
                y = y + saved
                saved = y
        return F.leaky_relu(y, self.slope)


class SpeakerNet(Module):
    """Maps magnitude spectrograms (..., F, frames) to speaker filters (..., D)."""

    def __init__(self, cfg: SpeakerNetConfig, rng: np.random.Generator, dtype=np.float64):
        self.cfg = cfg
        self.stacks = [
            Stack(cfg.n_freq if i == 0 else cfg.res_channels, cfg, rng, dtype) for i in range(cfg.stacks)
        ]
        self.linear = Conv1d(cfg.res_channels, cfg.out_channels, 1, rng, dtype=dtype)
        self.head = Linear(cfg.out_channels, cfg.filter_dim, rng, dtype=dtype)

    def forward(self, spec: Tensor) -> Tensor:
        if spec.shape[-1] < 1:
            raise ValueError("spectrogram has no frames")
        if spec.shape[-2] != self.cfg.n_freq:
            raise ValueError(f"spectrogram has {spec.shape[-2]} bins, speaker net expects {self.cfg.n_freq}")
        x = spec
        for stack in self.stacks:
            x = stack(x)
        z = self.linear(x)
        pooled = z.mean(axis=-1)
        return self.head(pooled.relu())

    def spectrogram(self, audio: np.ndarray) -> np.ndarray:
        """Magnitude STFT of (..., samples), zero-padded up to one frame."""
        audio = np.asarray(audio, dtype=np.float64)
        if audio.shape[-1] < self.cfg.frame_len:
            raise ValueError(f"audio of {audio.shape[-1]} samples is shorter than one STFT frame ({self.cfg.frame_len})")
        return stft_mag(audio, self.cfg.frame_len, self.cfg.hop).mags

    def embed_audio(self, audio: np.ndarray) -> Tensor:
        dtype = self.head.weight.dtype
        return self(Tensor(self.spectrogram(audio).astype(dtype)))


def extract_filter(spec: Spectrogram | np.ndarray, net: SpeakerNet, label: str | None = None) -> SpeakerFilter:
    mags = spec.mags if isinstance(spec, Spectrogram) else np.asarray(spec)
    if mags.ndim != 2 or mags.shape[1] < 1:
        raise ValueError(f"expected a (bins, frames) spectrogram with at least one frame, got {mags.shape}")
    v = net(Tensor(mags.astype(net.head.weight.dtype)))
    return SpeakerFilter(v.data, FilterSource.LEARNED, label)


def filter_from_waveform(w: Waveform, net: SpeakerNet, label: str | None = None) -> SpeakerFilter:
    return SpeakerFilter(net.embed_audio(w.samples).data, FilterSource.LEARNED, label)


class EmbeddingProjection(Module):
    """Trainable linear map from an external embedding to the filter dimension."""

    def __init__(self, in_dim: int, filter_dim: int, rng: np.random.Generator, dtype=np.float64):
        self.in_dim = in_dim
        self.linear = Linear(in_dim, filter_dim, rng, dtype=dtype)

    def forward(self, e: Tensor) -> Tensor:
        if e.shape[-1] != self.in_dim:
            raise ValueError(f"embedding has length {e.shape[-1]}, projection expects {self.in_dim}")
        return self.linear(e)


# -- external embedding files ---------------------------------------------------
#
# Text format, one header line then the values:
#
#   # dim=512 speaker=spk03
#   0.1253, -0.5512, ...
#
# Values may be separated by commas and/or whitespace over any number of lines.


class EmbeddingFormatError(ValueError):
    pass


def write_embedding(path: str | Path, v: np.ndarray, speaker_label: str | None = None) -> None:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    header = f"# dim={v.size}" + (f" speaker={speaker_label}" if speaker_label else "")
    body = "\n".join(repr(float(x)) for x in v)
    Path(path).write_text(header + "\n" + body + "\n")


def read_embedding(path: str | Path) -> tuple[np.ndarray, str | None]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise EmbeddingFormatError(f"{path}: missing '# dim=...' header line")
    fields = dict(tok.split("=", 1) for tok in lines[0][1:].split() if "=" in tok)
    if "dim" not in fields:
        raise EmbeddingFormatError(f"{path}: header has no dim field")
    dim = int(fields["dim"])
    values = [float(tok) for line in lines[1:] for tok in line.replace(",", " ").split()]
    if len(values) != dim:
        raise EmbeddingFormatError(f"{path}: header declares dim={dim} but {len(values)} values follow")
    return np.array(values), fields.get("speaker")


def load_external_embedding(path: str | Path, projection: EmbeddingProjection) -> SpeakerFilter:
    e, label = read_embedding(path)
    if e.size != projection.in_dim:
        raise EmbeddingFormatError(f"{path}: embedding length {e.size} != projection input {projection.in_dim}")
    v = projection(Tensor(e.astype(projection.linear.weight.dtype)))
    return SpeakerFilter(v.data, FilterSource.EXTERNAL, label)
