"""The cascade: baseline separator -> speaker module -> conditioned separator.

``DPFN`` bundles the speaker module (or an external-embedding projection)
with a conditioned separator. Model checkpoints record everything needed to
rebuild the module tree in their config.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Linear, Module, Tensor, load_checkpoint, no_grad, save_checkpoint
from .losses import align_outputs
from .separation import Mode, Separator, SeparatorConfig, condition_vector, separate
from .signal import SAMPLE_RATE, Waveform
from .speaker import (
    EmbeddingProjection,
    SpeakerFilter,
    SpeakerNet,
    SpeakerNetConfig,
    filter_from_waveform,
)

DTYPES = {"float32": np.float32, "float64": np.float64}


class DPFN(Module):
    """Speaker module plus FiLM-conditioned separator.

    With ``embed_dim`` set, filters come from external embeddings through a
    trainable projection instead of from audio.
    """

    def __init__(
        self,
        sep_cfg: SeparatorConfig,
        spk_cfg: SpeakerNetConfig,
        rng: np.random.Generator,
        dtype=np.float64,
        embed_dim: int | None = None,
        num_speakers: int = 0,
    ):
        if sep_cfg.mode is Mode.NONE:
            raise ValueError("DPFN needs a conditioning mode other than 'none'")
        if sep_cfg.filter_dim != spk_cfg.filter_dim:
            raise ValueError(f"separator filter_dim {sep_cfg.filter_dim} != speaker filter_dim {spk_cfg.filter_dim}")
        self.sep_cfg, self.spk_cfg = sep_cfg, spk_cfg
        self.embed_dim = embed_dim
        self.num_speakers = num_speakers
        self.speaker = SpeakerNet(spk_cfg, rng, dtype)
        self.projection = EmbeddingProjection(embed_dim, spk_cfg.filter_dim, rng, dtype) if embed_dim else None
        self.separator = Separator(sep_cfg, rng, dtype)
        # identity-loss head, only present when that loss is switched on
        self.classifier = Linear(spk_cfg.filter_dim, num_speakers, rng, dtype=dtype) if num_speakers else None

    @property
    def mode(self) -> Mode:
        return self.sep_cfg.mode

    @property
    def dtype(self):
        return self.separator.dtype

    def filters_from_audio(self, audio: np.ndarray) -> Tensor:
        """(B, samples) clean or separated speech -> (B, D) filters."""
        return self.speaker.embed_audio(np.asarray(audio))

    def filters_from_embeddings(self, emb: np.ndarray) -> Tensor:
        if self.projection is None:
            raise ValueError("model has no external-embedding projection")
        return self.projection(Tensor(np.asarray(emb, dtype=self.dtype)))

    def forward(self, mix: Tensor, cond: Tensor) -> Tensor:
        est, _ = self.separator(mix, cond)
        return est

    def config(self) -> dict:
        return {
            "separator": self.sep_cfg.to_dict(),
            "speaker": self.spk_cfg.to_dict(),
            "embed_dim": self.embed_dim,
            "num_speakers": self.num_speakers,
        }


# -- checkpoints ----------------------------------------------------------------


def save_model(path: str | Path, model: Module, extra: dict | None = None) -> Path:
    if isinstance(model, DPFN):
        config = {"kind": "dpfn", **model.config()}
    elif isinstance(model, Separator):
        config = {"kind": "baseline", "separator": model.cfg.to_dict()}
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    config["dtype"] = np.dtype(model.dtype).name
    config["sample_rate"] = SAMPLE_RATE
    config.update(extra or {})
    return save_checkpoint(path, model.state_dict(), config)


def load_model(path: str | Path) -> tuple[Module, dict]:
    state, config = load_checkpoint(path)
    dtype = DTYPES[config.get("dtype", "float64")]
    rng = np.random.default_rng(0)
    sep_cfg = SeparatorConfig(**config["separator"])
    if config.get("kind") == "dpfn":
        model = DPFN(
            sep_cfg,
            SpeakerNetConfig(**config["speaker"]),
            rng,
            dtype,
            embed_dim=config.get("embed_dim"),
            num_speakers=config.get("num_speakers", 0),
        )
    elif config.get("kind") == "baseline":
        model = Separator(sep_cfg, rng, dtype)
    else:
        raise ValueError(f"{path}: unknown model kind {config.get('kind')!r}")
    model.load_state_dict(state)
    return model, config


# -- inference --------------------------------------------------------------------


def baseline_separate(mixture: Waveform, baseline: Separator) -> list[Waveform]:
    return separate(mixture, [], baseline)


def extract_filters(estimates: Sequence[Waveform], model: DPFN, labels=None) -> list[SpeakerFilter]:
    """One filter per estimate, computed exactly as ``dpfn embed`` does for a single file."""
    labels = list(labels) if labels is not None else [None] * len(estimates)
    with no_grad():
        return [filter_from_waveform(e, model.speaker, lab) for e, lab in zip(estimates, labels)]


def dpfn_separate(mixture: Waveform, filters: Sequence[SpeakerFilter], model: DPFN) -> list[Waveform]:
    """One output per speaker, ordered like ``filters``.

    ``target``: each filter extracts its own speaker. ``non-target``: speaker j
    is extracted by conditioning on the other filter. ``both``: one pass with
    the concatenated filters.
    """
    filters = list(filters)
    mode = model.mode
    if mode is Mode.BOTH:
        cond = condition_vector(filters, mode)
    elif mode is Mode.NON_TARGET:
        if len(filters) != 2:
            raise ValueError(f"mode 'non-target' needs exactly 2 filters, got {len(filters)}")
        cond = condition_vector(filters[::-1], mode)
    else:
        cond = condition_vector(filters, mode)
    if cond.shape[1] != model.sep_cfg.cond_dim:
        raise ValueError(f"filter dimension {cond.shape[1]} does not match the model's {model.sep_cfg.cond_dim}")
    mix = np.broadcast_to(mixture.samples, (cond.shape[0], len(mixture))).astype(model.dtype)
    with no_grad():
        est = model(Tensor(mix), Tensor(cond.astype(model.dtype)))
    return [Waveform(row.astype(np.float64), mixture.sample_rate) for row in est.data.reshape(-1, len(mixture))]


def cascade(
    mixture: Waveform,
    baseline: Separator,
    model: DPFN,
    filters: Sequence[SpeakerFilter] | None = None,
) -> tuple[list[Waveform], list[Waveform], list[SpeakerFilter]]:
    """Baseline separation, speaker filters from its outputs, then DPFN.

    Returns ``(final, initial, filters)``; externally supplied ``filters``
    replace the extraction step.
    """
    initial = baseline_separate(mixture, baseline)
    if filters is None:
        filters = extract_filters(initial, model)
    return dpfn_separate(mixture, filters, model), initial, list(filters)


def aligned_initial(mixture: Waveform, baseline: Separator, references: Sequence[Waveform]) -> list[Waveform]:
    """Baseline estimates reordered to match ``references``."""
    return [p.estimate for p in align_outputs(baseline_separate(mixture, baseline), list(references))]
