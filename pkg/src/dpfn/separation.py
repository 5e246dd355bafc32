"""Mask-based time-domain separator with dual-path BiLSTM blocks and FiLM speaker conditioning.

Pipeline: encoder -> LayerNorm + 1x1 bottleneck -> segmentation -> L dual-path
blocks -> PReLU + 1x1 conv -> overlap-add -> sigmoid masks -> decoder.
In ``none`` mode no conditioning is used and one mask per source is produced,
which is the plain DPRNN-TasNet baseline.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .autodiff import BiLSTM, Conv1d, ConvTranspose1d, LayerNorm, Linear, Module, PReLU, Tensor, no_grad
from .autodiff import functional as F
from .signal import Waveform
from .speaker import SpeakerFilter


class Mode(str, Enum):
    NONE = "none"
    TARGET = "target"
    NON_TARGET = "non-target"
    BOTH = "both"


@dataclass
class SeparatorConfig:
    enc_kernel: int = 16
    enc_stride: int = 8
    enc_filters: int = 64
    bottleneck: int = 32
    chunk_size: int = 50
    num_layers: int = 4
    hidden: int = 32
    mode: Mode = Mode.NONE
    filter_dim: int = 16
    num_sources: int = 2

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.num_layers < 2 or self.num_layers % 2:
            raise ValueError(f"num_layers must be even (intra/inter pairs), got {self.num_layers}")
        if self.chunk_size < 2 or self.chunk_size % 2:
            raise ValueError(f"chunk_size must be even, got {self.chunk_size}")
        if self.mode is Mode.NONE and self.num_sources < 2:
            raise ValueError("unconditioned separation needs num_sources >= 2")

    @property
    def chunk_hop(self) -> int:
        return self.chunk_size // 2

    @property
    def num_outputs(self) -> int:
        if self.mode is Mode.NONE:
            return self.num_sources
        return 2 if self.mode is Mode.BOTH else 1

    @property
    def cond_dim(self) -> int:
        if self.mode is Mode.NONE:
            return 0
        return 2 * self.filter_dim if self.mode is Mode.BOTH else self.filter_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


@dataclass
class ChunkTensor:
    data: Tensor  # (..., features, C, N)
    pad_info: int
    length: int

    @property
    def num_chunks(self) -> int:
        return self.data.shape[-1]


def segment(x: Tensor, chunk_size: int) -> ChunkTensor:
    """Right-pad (..., features, T) and cut into half-overlapping chunks (..., features, C, N)."""
    if chunk_size % 2:
        raise ValueError(f"chunk_size must be even, got {chunk_size}")
    hop = chunk_size // 2
    t = x.shape[-1]
    padded = max(t + hop - t % hop, chunk_size)
    pad = padded - t
    xp = F.pad(x, [(0, 0)] * (x.ndim - 1) + [(0, pad)])
    return ChunkTensor(F.frames(xp, chunk_size, hop), pad, t)


def overlap_add(chunks: ChunkTensor | Tensor, hop: int | None = None, length: int | None = None) -> Tensor:
    """Sum chunks back into (..., features, T), divide by coverage and drop the padding."""
    if isinstance(chunks, ChunkTensor):
        data, length = chunks.data, chunks.length
    else:
        data = chunks
    size, n = data.shape[-2], data.shape[-1]
    hop = hop or size // 2
    summed = F.overlap_add(data, hop)
    count = np.zeros(summed.shape[-1])
    for j in range(n):
        count[j * hop : j * hop + size] += 1
    out = summed * (1.0 / count).astype(data.dtype)
    if length is not None:
        out = out[..., :length]
    return out


class FiLM(Module):
    """Per-channel scale and shift predicted from the speaker condition."""

    def __init__(self, cond_dim: int, channels: int, rng: np.random.Generator, dtype=np.float64):
        self.scale = Linear(cond_dim, channels, rng, dtype=dtype)
        self.shift = Linear(cond_dim, channels, rng, dtype=dtype)
        # start close to the identity modulation
        self.scale.bias.data[:] = 1.0

    def forward(self, cond: Tensor) -> tuple[Tensor, Tensor]:
        return self.scale(cond), self.shift(cond)


class DualPathBlock(Module):
    """BiLSTM + FC along one chunk axis, optional FiLM, PReLU, LayerNorm and residual."""

    def __init__(
        self,
        channels: int,
        hidden: int,
        orientation: str,
        cond_dim: int,
        rng: np.random.Generator,
        dtype=np.float64,
    ):
        if orientation not in ("intra", "inter"):
            raise ValueError(f"orientation must be 'intra' or 'inter', got {orientation!r}")
        self.orientation = orientation
        self.rnn = BiLSTM(channels, hidden, rng, dtype)
        self.fc = Linear(2 * hidden, channels, rng, dtype=dtype)
        self.film = FiLM(cond_dim, channels, rng, dtype) if cond_dim else None
        self.act = PReLU(channels, axis=1, dtype=dtype)
        self.norm = LayerNorm(channels, axis=1, dtype=dtype)
        self.cond_dim = cond_dim

    def forward(self, r: Tensor, cond: Tensor | None = None) -> Tensor:
        b, f, c, n = r.shape
        if self.orientation == "intra":
            seq = r.transpose(0, 3, 2, 1).reshape(b * n, c, f)
            y = self.fc(self.rnn(seq)).reshape(b, n, c, f).transpose(0, 3, 2, 1)
        else:
            seq = r.transpose(0, 2, 3, 1).reshape(b * c, n, f)
            y = self.fc(self.rnn(seq)).reshape(b, c, n, f).transpose(0, 3, 1, 2)
        if self.film is not None:
            if cond is None:
                raise ValueError("conditioned block called without a speaker condition")
            if cond.shape != (b, self.cond_dim):
                raise ValueError(f"condition shape {cond.shape}, expected ({b}, {self.cond_dim})")
            c1, c2 = self.film(cond)
            y = c1.reshape(b, f, 1, 1) * y + c2.reshape(b, f, 1, 1)
        elif cond is not None:
            raise ValueError("unconditioned block got a speaker condition")
        return self.norm(self.act(y)) + r


class Separator(Module):
    def __init__(self, cfg: SeparatorConfig, rng: np.random.Generator, dtype=np.float64):
        self.cfg = cfg
        e, bn = cfg.enc_filters, cfg.bottleneck
        self.encoder = Conv1d(1, e, cfg.enc_kernel, rng, stride=cfg.enc_stride, bias=False, dtype=dtype)
        self.in_norm = LayerNorm(e, axis=-2, dtype=dtype)
        self.bottleneck = Conv1d(e, bn, 1, rng, dtype=dtype)
        self.blocks = [
            DualPathBlock(bn, cfg.hidden, "intra" if i % 2 == 0 else "inter", cfg.cond_dim, rng, dtype)
            for i in range(cfg.num_layers)
        ]
        self.out_act = PReLU(bn, axis=1, dtype=dtype)
        self.mask_conv = Linear(bn, e * cfg.num_outputs, rng, dtype=dtype)
        self.decoder = ConvTranspose1d(e, 1, cfg.enc_kernel, rng, stride=cfg.enc_stride, bias=False, dtype=dtype)

    @property
    def dtype(self):
        return self.encoder.weight.dtype

    def padded_length(self, length: int) -> int:
        k, s = self.cfg.enc_kernel, self.cfg.enc_stride
        if length < k:
            raise ValueError(f"input of {length} samples is shorter than the encoder kernel ({k})")
        return k + s * -(-(length - k) // s)

    def encode(self, mix: Tensor) -> Tensor:
        """(B, samples) -> (B, E, frames); input is right-padded so every sample is covered."""
        length = mix.shape[-1]
        pad = self.padded_length(length) - length
        x = F.pad(mix, [(0, 0), (0, pad)]) if pad else mix
        return self.encoder(x.reshape(x.shape[0], 1, x.shape[1])).relu()

    def estimate_masks(self, enc: Tensor, cond: Tensor | None = None) -> Tensor:
        b, e, t = enc.shape
        y = self.bottleneck(self.in_norm(enc))
        chunks = segment(y, self.cfg.chunk_size)
        r = chunks.data
        for block in self.blocks:
            r = block(r, cond)
        r = self.out_act(r)
        # 1x1 conv over the feature axis of the 4-d chunk tensor
        r = self.mask_conv(r.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)
        seq = overlap_add(r, self.cfg.chunk_hop, t)
        return seq.reshape(b, self.cfg.num_outputs, e, t).sigmoid()

    def decode(self, masked: Tensor, length: int) -> Tensor:
        b, n, e, t = masked.shape
        wav = self.decoder(masked.reshape(b * n, e, t))
        return wav.reshape(b, n, wav.shape[-1])[..., :length]

    def forward(self, mix: Tensor, cond: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Return ``(estimates, masks)`` shaped (B, n_out, samples) and (B, n_out, E, frames)."""
        if mix.ndim == 1:
            mix = mix.reshape(1, -1)
        if self.cfg.mode is Mode.NONE and cond is not None:
            raise ValueError("baseline separator takes no speaker condition")
        if self.cfg.mode is not Mode.NONE and cond is None:
            raise ValueError(f"mode {self.cfg.mode.value!r} needs a speaker condition")
        enc = self.encode(mix)
        masks = self.estimate_masks(enc, cond)
        masked = masks * enc.reshape(enc.shape[0], 1, *enc.shape[1:])
        return self.decode(masked, mix.shape[-1]), masks

    def force_identity_film(self) -> None:
        """Zero the FiLM weights so every block sees c1 = 1 and c2 = 0."""
        for block in self.blocks:
            if block.film is not None:
                block.film.scale.weight.data[:] = 0.0
                block.film.scale.bias.data[:] = 1.0
                block.film.shift.weight.data[:] = 0.0
                block.film.shift.bias.data[:] = 0.0


def condition_vector(filters: Sequence[SpeakerFilter], mode: Mode) -> np.ndarray:
    """Stack filters into the (B, cond_dim) conditioning matrix for ``mode``.

    Single-filter modes get one row per filter; ``both`` concatenates exactly two.
    """
    mode = Mode(mode)
    if mode is Mode.NONE:
        if filters:
            raise ValueError("mode 'none' takes no speaker filters")
        return None
    if mode is Mode.BOTH:
        if len(filters) != 2:
            raise ValueError(f"mode 'both' needs exactly 2 filters, got {len(filters)}")
        return np.concatenate([filters[0].v, filters[1].v])[None, :]
    if not filters:
        raise ValueError(f"mode {mode.value!r} needs at least one speaker filter")
    return np.stack([f.v for f in filters])


def separate(w: Waveform, filters: Sequence[SpeakerFilter], model: Separator) -> list[Waveform]:
    """Separate one mixture.

    ``target`` / ``non-target``: one output per filter; ``both``: two outputs
    ordered like the two filters; ``none``: ``num_sources`` outputs.
    """
    cfg = model.cfg
    cond = condition_vector(list(filters), cfg.mode)
    if cond is not None and cond.shape[1] != cfg.cond_dim:
        raise ValueError(f"filter dimension {cond.shape[1]} does not match the model's {cfg.cond_dim}")
    batch = 1 if cond is None else cond.shape[0]
    mix = np.broadcast_to(w.samples, (batch, len(w))).astype(model.dtype)
    with no_grad():
        est, _ = model(Tensor(mix), None if cond is None else Tensor(cond.astype(model.dtype)))
    flat = est.data.reshape(-1, len(w))
    return [Waveform(row.astype(np.float64), w.sample_rate) for row in flat]
