"""Training loops: PIT baseline, and alignment-based DPFN training in all phases."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Adam, Module, Tensor, no_grad
from .data import MixtureExample, speaker_index
from .losses import align_outputs, batch_pit_loss, identity_loss, reconstruction_loss, si_snr
from .pipeline import DTYPES, DPFN, baseline_separate
from .separation import Mode, Separator, SeparatorConfig
from .speaker import SpeakerNetConfig


class Phase(str, Enum):
    BASELINE = "baseline-pit"
    PRETRAIN = "dpfn-pretrain-clean"
    FINETUNE = "dpfn-finetune-separated"
    KNOWN = "known-speaker"


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    loss_eps: float = 1e-8
    seed: int = 0
    phase: Phase = Phase.BASELINE
    identity_weight: float = 0.0
    dtype: str = "float32"
    # present the two filters of ``both`` mode in random order each epoch
    shuffle_both: bool = True

    def __post_init__(self):
        self.phase = Phase(self.phase)
        self.betas = tuple(self.betas)
        if self.loss_eps <= 0:
            raise ValueError(f"loss epsilon must be > 0, got {self.loss_eps}")
        if self.identity_weight < 0:
            raise ValueError(f"identity-loss weight must be >= 0, got {self.identity_weight}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phase"] = self.phase.value
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainResult:
    model: Module
    history: list[dict] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.history[-1]["train_loss_db"]


class TrainLog:
    """Append-only JSON-lines log of per-epoch records."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []

    def append(self, epoch: int, phase: Phase, train_loss: float, val: float | None) -> dict:
        rec = {
            "epoch": epoch,
            "phase": Phase(phase).value,
            "train_loss_db": float(train_loss),
            "val_si_snr_db": None if val is None else float(val),
        }
        self.records.append(rec)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec


def _stack(examples: Sequence[MixtureExample], dtype) -> tuple[np.ndarray, np.ndarray]:
    lengths = {len(ex.mixture) for ex in examples}
    if len(lengths) != 1:
        raise ValueError(f"examples in a batch must share one length, got {sorted(lengths)}")
    mix = np.stack([ex.mixture.samples for ex in examples]).astype(dtype)
    refs = np.stack([np.stack([s.samples for s in ex.sources]) for ex in examples]).astype(dtype)
    return mix, refs


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _check_dataset(dataset) -> list[MixtureExample]:
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty training dataset")
    for ex in dataset:
        if len(ex.sources) != 2:
            raise ValueError(f"example {ex.id!r} has {len(ex.sources)} sources; training expects 2")
    return dataset


# -- baseline -------------------------------------------------------------------------


def baseline_val_si_snr(model: Separator, examples: Sequence[MixtureExample], batch_size: int = 8) -> float:
    """Mean SI-SNR of PIT-aligned outputs."""
    scores = []
    for i in range(0, len(examples), batch_size):
        mix, refs = _stack(examples[i : i + batch_size], model.dtype)
        with no_grad():
            est, _ = model(Tensor(mix))
            loss, _ = batch_pit_loss(Tensor(est.data.astype(np.float64)), refs.astype(np.float64))
        scores.append(-loss.item() * len(mix))
    return float(np.sum(scores) / len(examples))


def train_baseline(
    dataset: Sequence[MixtureExample],
    config: TrainConfig,
    sep_cfg: SeparatorConfig | None = None,
    val: Sequence[MixtureExample] | None = None,
    log: TrainLog | None = None,
    init: Separator | None = None,
) -> TrainResult:
    """Train the unconditioned separator with utterance-level PIT."""
    dataset = _check_dataset(dataset)
    sep_cfg = sep_cfg or SeparatorConfig()
    if sep_cfg.mode is not Mode.NONE:
        raise ValueError(f"baseline separator must use mode 'none', got {sep_cfg.mode.value!r}")
    dtype = DTYPES[config.dtype]
    model = init or Separator(sep_cfg, np.random.default_rng(config.seed), dtype)
    opt = Adam(model.named_parameters(), config.lr, config.betas, config.adam_eps, config.clip_norm)
    order_rng = np.random.default_rng([config.seed, 1])
    log = log or TrainLog()
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for idx in _batches(len(dataset), config.batch_size, order_rng):
            mix, refs = _stack([dataset[i] for i in idx], dtype)
            opt.zero_grad()
            est, _ = model(Tensor(mix))
            loss, _ = batch_pit_loss(est, refs, config.loss_eps)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        v = baseline_val_si_snr(model, val) if val else None
        log.append(epoch, Phase.BASELINE, total / len(dataset), v)
    return TrainResult(model, log.records)


# -- DPFN --------------------------------------------------------------------------


def _speaker_audio(
    dataset: Sequence[MixtureExample], phase: Phase, baseline: Separator | None
) -> list[np.ndarray]:
    """Per example, the (2, samples) audio the speaker module sees, ordered like the references."""
    if phase is Phase.PRETRAIN:
        return [np.stack([s.samples for s in ex.sources]) for ex in dataset]
    if phase is Phase.FINETUNE:
        if baseline is None:
            raise ValueError("fine-tuning on separated speech needs a baseline checkpoint")
        out = []
        for ex in dataset:
            pairs = align_outputs(baseline_separate(ex.mixture, baseline), ex.sources)
            out.append(np.stack([p.estimate.samples for p in pairs]))
        return out
    return []


class ConditionBatch:
    """Separator inputs and targets for one batch under a conditioning mode."""

    def __init__(self, mix: np.ndarray, refs: np.ndarray, filters: Tensor, mode: Mode, orders: np.ndarray):
        b, _, length = refs.shape
        d = filters.shape[-1]
        self.mode = mode
        if mode is Mode.TARGET:
            self.cond = filters.reshape(2 * b, d)
            self.mix = np.repeat(mix, 2, axis=0)
            self.refs = refs
        elif mode is Mode.NON_TARGET:
            self.cond = filters[:, [1, 0]].reshape(2 * b, d)
            self.mix = np.repeat(mix, 2, axis=0)
            self.refs = refs
        elif mode is Mode.BOTH:
            rows = np.arange(b)[:, None]
            self.cond = filters[rows, orders].reshape(b, 2 * d)
            self.mix = mix
            self.refs = refs[rows, orders]
        else:
            raise ValueError(f"mode {mode.value!r} is not a DPFN conditioning mode")
        self.shape = (b, 2, length)

    def outputs(self, model: DPFN) -> Tensor:
        return model(Tensor(self.mix), self.cond).reshape(*self.shape)


def dpfn_filters(model: DPFN, phase: Phase, audio: np.ndarray | None, emb: np.ndarray | None) -> Tensor:
    """(B, 2, D) filters for a batch."""
    if phase is Phase.KNOWN:
        b = emb.shape[0]
        return model.filters_from_embeddings(emb.reshape(2 * b, -1)).reshape(b, 2, -1)
    b, _, length = audio.shape
    return model.filters_from_audio(audio.reshape(2 * b, length)).reshape(b, 2, -1)


def dpfn_val_si_snr(
    model: DPFN,
    examples: Sequence[MixtureExample],
    phase: Phase,
    baseline: Separator | None = None,
    embeddings: dict | None = None,
    batch_size: int = 8,
) -> float:
    """Mean SI-SNR of the fixed-order outputs against their references."""
    audio = _speaker_audio(examples, phase, baseline)
    total = 0.0
    with no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = list(examples[i : i + batch_size])
            mix, refs = _stack(chunk, model.dtype)
            a = np.stack(audio[i : i + batch_size]) if audio else None
            e = _embedding_batch(chunk, embeddings) if phase is Phase.KNOWN else None
            filters = dpfn_filters(model, phase, a, e)
            batch = ConditionBatch(mix, refs, filters, model.mode, np.tile([0, 1], (len(chunk), 1)))
            est = batch.outputs(model)
            total += float(si_snr(Tensor(est.data.astype(np.float64)), batch.refs.astype(np.float64)).data.mean(axis=1).sum())
    return total / len(examples)


def _embedding_batch(examples: Sequence[MixtureExample], embeddings: dict | None) -> np.ndarray:
    if not embeddings:
        raise ValueError("known-speaker training needs external embeddings for every speaker")
    missing = sorted({s for ex in examples for s in ex.speaker_ids} - set(embeddings))
    if missing:
        raise ValueError(f"no external embedding for speakers {missing}")
    return np.stack([np.stack([embeddings[s] for s in ex.speaker_ids]) for ex in examples])


def train_dpfn(
    dataset: Sequence[MixtureExample],
    config: TrainConfig,
    sep_cfg: SeparatorConfig,
    spk_cfg: SpeakerNetConfig | None = None,
    baseline: Separator | None = None,
    init: DPFN | None = None,
    val: Sequence[MixtureExample] | None = None,
    embeddings: dict[str, np.ndarray] | None = None,
    log: TrainLog | None = None,
) -> TrainResult:
    """Train speaker module and conditioned separator jointly, without permutation search.

    The speaker module reads clean references (pretrain phase), aligned
    baseline outputs (fine-tune phase), or projected external embeddings
    (known-speaker phase). Each output is tied to a reference by construction,
    so the loss is a plain reconstruction loss.
    """
    dataset = _check_dataset(dataset)
    phase = config.phase
    if phase is Phase.BASELINE:
        raise ValueError("use train_baseline for the baseline-pit phase")
    if phase is Phase.FINETUNE and baseline is None:
        raise ValueError("fine-tuning on separated speech needs a baseline checkpoint")
    dtype = DTYPES[config.dtype]
    spk_cfg = spk_cfg or SpeakerNetConfig(filter_dim=sep_cfg.filter_dim)
    labels = speaker_index(dataset)
    use_identity = config.identity_weight > 0
    embed_dim = None
    if phase is Phase.KNOWN:
        emb = _embedding_batch(dataset, embeddings)
        embed_dim = emb.shape[-1]
    if init is not None:
        model = init
    else:
        model = DPFN(
            sep_cfg,
            spk_cfg,
            np.random.default_rng(config.seed),
            dtype,
            embed_dim=embed_dim,
            num_speakers=len(labels) if use_identity else 0,
        )
    if use_identity and model.classifier is None:
        raise ValueError("identity loss requested but the model has no classifier head")
    params = [
        (n, p)
        for n, p in model.named_parameters()
        # parts that take no part in this phase's loss stay frozen
        if not (n.startswith("speaker.") and phase is Phase.KNOWN)
        and not (n.startswith("projection.") and phase is not Phase.KNOWN)
        and not (n.startswith("classifier.") and not use_identity)
    ]
    opt = Adam(params, config.lr, config.betas, config.adam_eps, config.clip_norm)
    audio = _speaker_audio(dataset, phase, baseline)
    order_rng = np.random.default_rng([config.seed, 1])
    swap_rng = np.random.default_rng([config.seed, 2])
    log = log or TrainLog()
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for idx in _batches(len(dataset), config.batch_size, order_rng):
            chunk = [dataset[i] for i in idx]
            mix, refs = _stack(chunk, dtype)
            orders = np.tile([0, 1], (len(idx), 1))
            if model.mode is Mode.BOTH and config.shuffle_both:
                orders = np.array([swap_rng.permutation(2) for _ in idx])
            opt.zero_grad()
            a = np.stack([audio[i] for i in idx]) if audio else None
            e = _embedding_batch(chunk, embeddings) if phase is Phase.KNOWN else None
            filters = dpfn_filters(model, phase, a, e)
            batch = ConditionBatch(mix, refs, filters, model.mode, orders)
            loss = reconstruction_loss(batch.outputs(model), batch.refs, config.loss_eps)
            if use_identity:
                target = [labels[s] for ex in chunk for s in ex.speaker_ids]
                li = identity_loss(filters.reshape(2 * len(idx), -1), target, model.classifier, len(labels))
                loss = loss + li * config.identity_weight
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        v = dpfn_val_si_snr(model, val, phase, baseline, embeddings) if val else None
        log.append(epoch, phase, total / len(dataset), v)
    return TrainResult(model, log.records)
