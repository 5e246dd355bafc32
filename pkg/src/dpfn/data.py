"""Synthetic two-speaker corpus.

Each synthetic speaker is a harmonic source whose partials are confined to a
speaker-specific frequency band by a smooth spectral envelope; f0, vibrato
and amplitude modulation vary per utterance. Bands of different speakers may
overlap, but only speakers with disjoint bands are mixed, so an ideal
band-pass filter separates every mixture. Pairs are mixed at an SNR drawn
uniformly from [0, 5] dB, and the eval split uses speakers never seen in
train/dev.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .signal import SAMPLE_RATE, Waveform, quantize, read_wav, write_wav

PEAK = 0.9
MIN_DURATION = 0.25
SPLITS = ("train", "dev", "eval")


@dataclass
class SyntheticSpeaker:
    id: str
    f0_range: tuple[float, float]
    band: tuple[float, float]
    harmonic_profile: list[float]
    am_rate_range: tuple[float, float]
    seed: int
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        nyq = self.sample_rate / 2
        for name, (lo, hi) in (("f0_range", self.f0_range), ("band", self.band)):
            if not 0 < lo < hi < nyq:
                raise ValueError(f"speaker {self.id}: {name} {lo}-{hi} Hz not inside (0, {nyq})")
        self.f0_range = tuple(self.f0_range)
        self.band = tuple(self.band)
        self.am_rate_range = tuple(self.am_rate_range)

    def envelope(self, freq: np.ndarray) -> np.ndarray:
        """Amplitude of a partial at ``freq``: a bump over the band, zero outside."""
        lo, hi = self.band
        pos = np.clip((freq - lo) / (hi - lo), 0.0, 1.0)
        profile = np.asarray(self.harmonic_profile)
        shape = np.interp(pos, np.linspace(0, 1, profile.size), profile)
        inside = (freq > lo) & (freq < hi)
        return np.where(inside, shape * np.sin(np.pi * pos), 0.0)


@dataclass
class MixtureExample:
    mixture: Waveform
    sources: list[Waveform]
    speaker_ids: list[str]
    snr_db: float
    id: str = ""
    split: str = ""
    seed: int = 0

    def __post_init__(self):
        n = len(self.mixture)
        if any(len(s) != n for s in self.sources):
            raise ValueError("mixture and sources must have equal lengths")


BAND_GUARD = 100.0


def bands_disjoint(a: SyntheticSpeaker, b: SyntheticSpeaker, guard: float = BAND_GUARD) -> bool:
    return a.band[1] + guard <= b.band[0] or b.band[1] + guard <= a.band[0]


def partner_pairs(speakers: Sequence[SyntheticSpeaker]) -> list[tuple[int, int]]:
    """Index pairs whose bands are disjoint; only these are mixed."""
    n = len(speakers)
    return [(i, j) for i in range(n) for j in range(i + 1, n) if bands_disjoint(speakers[i], speakers[j])]


def _draw_speaker(rng: np.random.Generator, i: int, sample_rate: int) -> SyntheticSpeaker:
    top = 0.95 * sample_rate / 2
    width = float(rng.uniform(500.0, 1100.0))
    lo = float(rng.uniform(200.0, top - width))
    f0_lo = float(rng.uniform(80.0, 200.0))
    return SyntheticSpeaker(
        id=f"spk{i:02d}",
        f0_range=(round(f0_lo, 3), round(f0_lo * 1.15, 3)),
        band=(round(lo, 3), round(lo + width, 3)),
        harmonic_profile=[round(float(a), 4) for a in rng.uniform(0.3, 1.0, size=4)],
        am_rate_range=(round(float(rng.uniform(2.0, 3.0)), 3), round(float(rng.uniform(4.0, 6.0)), 3)),
        seed=int(rng.integers(2**31)),
        sample_rate=sample_rate,
    )


def make_speakers(
    num_speakers: int,
    seed: int,
    sample_rate: int = SAMPLE_RATE,
    groups: Sequence[int] | None = None,
) -> list[SyntheticSpeaker]:
    """Speakers with random, possibly overlapping bands.

    ``groups`` partitions the speakers into consecutive runs (e.g. seen and
    eval-only); each group is redrawn until every member has at least one
    band-disjoint partner inside its group.
    """
    rng = np.random.default_rng(seed)
    groups = list(groups) if groups is not None else [num_speakers]
    if sum(groups) != num_speakers or min(groups) < 2:
        raise ValueError(f"groups {groups} must partition {num_speakers} speakers into runs of >= 2")
    speakers: list[SyntheticSpeaker] = []
    for size in groups:
        base = len(speakers)
        for _ in range(1000):
            group = [_draw_speaker(rng, base + k, sample_rate) for k in range(size)]
            covered = {i for pair in partner_pairs(group) for i in pair}
            if len(covered) == size:
                break
        else:
            raise RuntimeError(f"could not draw {size} speakers with disjoint partners")
        speakers.extend(group)
    return speakers


def synth_utterance(speaker: SyntheticSpeaker, duration_s: float, seed: int) -> Waveform:
    if duration_s < MIN_DURATION:
        raise ValueError(f"duration {duration_s} s is below the minimum of {MIN_DURATION} s")
    sr = speaker.sample_rate
    rng = np.random.default_rng([speaker.seed, seed])
    n = int(round(duration_s * sr))
    t = np.arange(n) / sr
    f0 = rng.uniform(*speaker.f0_range)
    vib_rate, vib_depth = rng.uniform(3.0, 7.0), rng.uniform(0.01, 0.04)
    f0_t = f0 * (1.0 + vib_depth * np.sin(2 * np.pi * vib_rate * t + rng.uniform(0, 2 * np.pi)))
    phase0 = np.cumsum(2 * np.pi * f0_t / sr)
    nyq = sr / 2
    out = np.zeros(n)
    for h in range(1, int(speaker.band[1] / (f0 * (1 - vib_depth))) + 2):
        freq = h * f0_t
        amp = speaker.envelope(freq)
        if not np.any(amp > 0) or h * f0 > nyq:
            continue
        out += amp * np.sin(h * phase0 + rng.uniform(0, 2 * np.pi))
    am_rate = rng.uniform(*speaker.am_rate_range)
    am = 0.6 + 0.4 * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))
    out *= am
    peak = np.max(np.abs(out))
    if peak == 0:
        raise RuntimeError(f"speaker {speaker.id} produced silence; band {speaker.band} holds no partials")
    return Waveform(out * (PEAK / peak), sr)


def power(x: np.ndarray) -> float:
    return float(np.mean(np.asarray(x, dtype=np.float64) ** 2))


def mix_at_snr(s1: Waveform, s2: Waveform, snr_db: float) -> MixtureExample:
    """Scale ``s2`` so that P(s1) / P(s2') equals ``snr_db`` and add."""
    if len(s1) != len(s2):
        raise ValueError(f"source lengths differ: {len(s1)} vs {len(s2)}")
    p1, p2 = power(s1.samples), power(s2.samples)
    if p1 == 0 or p2 == 0:
        raise ValueError("cannot mix a zero-power source")
    scale = np.sqrt(p1 / (p2 * 10 ** (snr_db / 10)))
    s2s = s2.samples * scale
    return MixtureExample(
        Waveform(s1.samples + s2s, s1.sample_rate),
        [Waveform(s1.samples, s1.sample_rate), Waveform(s2s, s1.sample_rate)],
        [],
        float(snr_db),
    )


def band_pass(x: np.ndarray, band: tuple[float, float], sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Ideal FFT-mask band-pass filter."""
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(len(x), 1.0 / sample_rate)
    spec[(freqs < band[0]) | (freqs > band[1])] = 0
    return np.fft.irfft(spec, n=len(x))


@dataclass
class CorpusConfig:
    num_speakers: int = 12
    eval_speakers: int = 4
    counts: dict = field(default_factory=lambda: {"train": 64, "dev": 16, "eval": 16})
    duration_s: float = 1.0
    sample_rate: int = SAMPLE_RATE
    snr_range: tuple[float, float] = (0.0, 5.0)

    def to_dict(self) -> dict:
        return asdict(self)


def _grid(x: np.ndarray) -> np.ndarray:
    return quantize(x).astype(np.float64) / 32768.0


def build_corpus(out_dir: str | Path, cfg: CorpusConfig | None = None, seed: int = 0) -> list[dict]:
    """Write WAVs, ``speakers.json`` and ``manifest.jsonl`` under ``out_dir``.

    Sources are snapped to the 16-bit grid before summing, so the stored
    mixture equals the stored sources' sum exactly.
    """
    cfg = cfg or CorpusConfig()
    if cfg.num_speakers < 4:
        raise ValueError(f"need at least 4 speakers, got {cfg.num_speakers}")
    seen = cfg.num_speakers - cfg.eval_speakers
    if cfg.eval_speakers < 2 or seen < 2:
        raise ValueError(
            f"{cfg.num_speakers} speakers cannot give >= 2 eval-only and >= 2 train/dev speakers "
            f"(eval_speakers={cfg.eval_speakers})"
        )
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    speakers = make_speakers(cfg.num_speakers, int(rng.integers(2**31)), cfg.sample_rate, (seen, cfg.eval_speakers))
    pools = {"train": speakers[:seen], "dev": speakers[:seen], "eval": speakers[seen:]}
    pairs = {name: partner_pairs(pool) for name, pool in pools.items()}
    records = []
    for split in SPLITS:
        (out / "wav" / split).mkdir(parents=True, exist_ok=True)
        for k in range(cfg.counts.get(split, 0)):
            pool = pools[split]
            a, b = pairs[split][rng.integers(len(pairs[split]))]
            if rng.random() < 0.5:
                a, b = b, a
            spk = [pool[a], pool[b]]
            utt_seed = int(rng.integers(2**31))
            snr = float(rng.uniform(*cfg.snr_range))
            s1 = synth_utterance(spk[0], cfg.duration_s, utt_seed)
            s2 = synth_utterance(spk[1], cfg.duration_s, utt_seed + 1)
            ex = mix_at_snr(s1, s2, snr)
            gain = min(1.0, PEAK / np.max(np.abs(ex.mixture.samples)))
            srcs = [_grid(s.samples * gain) for s in ex.sources]
            mix = srcs[0] + srcs[1]
            name = f"{split}_{k:04d}"
            paths = {
                "mixture": f"wav/{split}/{name}_mix.wav",
                "sources": [f"wav/{split}/{name}_s{j + 1}.wav" for j in range(2)],
            }
            write_wav(out / paths["mixture"], Waveform(mix, cfg.sample_rate))
            for p, s in zip(paths["sources"], srcs):
                write_wav(out / p, Waveform(s, cfg.sample_rate))
            records.append(
                {
                    "id": name,
                    "split": split,
                    "mixture": paths["mixture"],
                    "sources": paths["sources"],
                    "speakers": [s.id for s in spk],
                    "snr_db": round(snr, 6),
                    "seed": utt_seed,
                }
            )
    (out / "speakers.json").write_text(json.dumps([asdict(s) for s in speakers], indent=2, sort_keys=True) + "\n")
    with open(out / "manifest.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    (out / "corpus.json").write_text(json.dumps({"seed": seed, **cfg.to_dict()}, indent=2, sort_keys=True) + "\n")
    return records


def read_manifest(corpus_dir: str | Path, split: str | None = None) -> list[dict]:
    path = Path(corpus_dir) / "manifest.jsonl"
    records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    return [r for r in records if split is None or r["split"] == split]


def read_speakers(corpus_dir: str | Path) -> dict[str, SyntheticSpeaker]:
    raw = json.loads((Path(corpus_dir) / "speakers.json").read_text())
    return {d["id"]: SyntheticSpeaker(**d) for d in raw}


def load_example(corpus_dir: str | Path, rec: dict) -> MixtureExample:
    root = Path(corpus_dir)
    return MixtureExample(
        read_wav(root / rec["mixture"]),
        [read_wav(root / p) for p in rec["sources"]],
        list(rec["speakers"]),
        float(rec["snr_db"]),
        rec["id"],
        rec["split"],
        int(rec.get("seed", 0)),
    )


def load_split(corpus_dir: str | Path, split: str) -> list[MixtureExample]:
    return [load_example(corpus_dir, r) for r in read_manifest(corpus_dir, split)]


def make_toy_set(
    num_mixtures: int,
    seed: int = 0,
    duration_s: float = 0.5,
    num_speakers: int = 8,
    sample_rate: int = SAMPLE_RATE,
) -> list[MixtureExample]:
    """In-memory mixtures for quick overfitting runs; no files written."""
    rng = np.random.default_rng(seed)
    speakers = make_speakers(num_speakers, int(rng.integers(2**31)), sample_rate)
    pairs = partner_pairs(speakers)
    out = []
    for k in range(num_mixtures):
        a, b = pairs[rng.integers(len(pairs))]
        if rng.random() < 0.5:
            a, b = b, a
        utt_seed = int(rng.integers(2**31))
        snr = float(rng.uniform(0.0, 5.0))
        ex = mix_at_snr(
            synth_utterance(speakers[a], duration_s, utt_seed),
            synth_utterance(speakers[b], duration_s, utt_seed + 1),
            snr,
        )
        ex.speaker_ids = [speakers[a].id, speakers[b].id]
        ex.id, ex.split, ex.seed = f"toy_{k:04d}", "train", utt_seed
        out.append(ex)
    return out


def speaker_index(examples: Sequence[MixtureExample]) -> dict[str, int]:
    """Stable speaker-id -> class-index map over a set of examples."""
    ids = sorted({s for ex in examples for s in ex.speaker_ids})
    return {s: i for i, s in enumerate(ids)}
