"""Command-line entry point: ``dpfn <command> [options]``.

Hyperparameters come from a JSON config file with optional sections
``corpus``, ``separator``, ``speaker`` and ``train``; command-line flags
override it. Metrics are printed as JSON lines followed by a plain table.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .autodiff import CheckpointError
from .data import CorpusConfig, build_corpus, load_split, read_manifest
from .losses import align_outputs, si_snr_value
from .pipeline import DPFN, baseline_separate, cascade, load_model, save_model
from .separation import Mode, Separator, SeparatorConfig
from .signal import WavFormatError, read_wav, write_wav
from .speaker import (
    EmbeddingFormatError,
    FilterSource,
    SpeakerFilter,
    SpeakerNetConfig,
    filter_from_waveform,
    load_external_embedding,
    read_embedding,
    write_embedding,
)
from .training import Phase, TrainConfig, TrainLog, train_baseline, train_dpfn

PHASES = {
    "pretrain-clean": Phase.PRETRAIN,
    "finetune-separated": Phase.FINETUNE,
    "known-speaker": Phase.KNOWN,
}


class UsageError(Exception):
    pass


# -- config ------------------------------------------------------------------------


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file {path} not found")
    cfg = json.loads(p.read_text())
    unknown = set(cfg) - {"corpus", "separator", "speaker", "train"}
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}")
    return cfg


def train_config(args, cfg: dict, phase: Phase) -> TrainConfig:
    d = dict(cfg.get("train", {}))
    if args.seed is not None:
        d["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        d["epochs"] = args.epochs
    d["phase"] = phase
    return TrainConfig(**d)


def separator_config(args, cfg: dict, mode: Mode) -> SeparatorConfig:
    d = dict(cfg.get("separator", {}))
    d["mode"] = mode
    return SeparatorConfig(**d)


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} {path} does not exist")
    return p


def _load(path: str, kind: type, what: str):
    _require_dir(path, what)
    model, config = load_model(path)
    if not isinstance(model, kind):
        raise UsageError(f"{path} is not a {what}")
    return model, config


def _load_embeddings(directory: str | None) -> dict[str, np.ndarray]:
    if not directory:
        return {}
    out = {}
    for f in sorted(_require_dir(directory, "embedding directory").glob("*.emb")):
        v, label = read_embedding(f)
        out[label or f.stem] = v
    return out


# -- commands ----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    corpus = CorpusConfig(**cfg.get("corpus", {}))
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out)
    records = build_corpus(out, corpus, seed)
    counts = {s: sum(r["split"] == s for r in records) for s in ("train", "dev", "eval")}
    print(f"manifest: {out / 'manifest.jsonl'}")
    print(json.dumps({"count": len(records), **counts}, sort_keys=True))
    return 0


def cmd_train_baseline(args) -> int:
    cfg = load_config(args.config)
    tc = train_config(args, cfg, Phase.BASELINE)
    data = _require_dir(args.data, "corpus directory")
    train, dev = load_split(data, "train"), load_split(data, "dev")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = TrainLog(out / "train_log.jsonl")
    log.path.write_text("")
    result = train_baseline(train, tc, separator_config(args, cfg, Mode.NONE), val=dev or None, log=log)
    save_model(out, result.model, {"train": tc.to_dict()})
    _print_log(result.history)
    return 0


def cmd_train_dpfn(args) -> int:
    cfg = load_config(args.config)
    phase = PHASES[args.phase]
    tc = train_config(args, cfg, phase)
    data = _require_dir(args.data, "corpus directory")
    train, dev = load_split(data, "train"), load_split(data, "dev")
    baseline = None
    if args.baseline_checkpoint:
        baseline, _ = _load(args.baseline_checkpoint, Separator, "baseline checkpoint")
    elif phase is Phase.FINETUNE:
        raise UsageError("--phase finetune-separated needs --baseline-checkpoint")
    init = None
    if args.checkpoint:
        init, _ = _load(args.checkpoint, DPFN, "DPFN checkpoint")
        if init.mode.value != args.mode:
            raise UsageError(f"--mode {args.mode} does not match checkpoint mode {init.mode.value}")
    sep_cfg = init.sep_cfg if init else separator_config(args, cfg, Mode(args.mode))
    spk_cfg = init.spk_cfg if init else SpeakerNetConfig(**{"filter_dim": sep_cfg.filter_dim, **cfg.get("speaker", {})})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = TrainLog(out / "train_log.jsonl")
    log.path.write_text("")
    result = train_dpfn(
        train,
        tc,
        sep_cfg,
        spk_cfg,
        baseline=baseline,
        init=init,
        val=dev or None,
        embeddings=_load_embeddings(args.embeddings),
        log=log,
    )
    save_model(out, result.model, {"train": tc.to_dict()})
    _print_log(result.history)
    return 0


def _print_log(history: list[dict]) -> None:
    for rec in history:
        print(json.dumps(rec, sort_keys=True))


def _filters_for(model: DPFN, ex_speakers, embeddings: dict) -> list[SpeakerFilter] | None:
    """External filters for the known-speaker path, or None to extract from audio."""
    if model.projection is None:
        return None
    missing = [s for s in ex_speakers if s not in embeddings]
    if missing:
        raise UsageError(f"no external embedding for speakers {missing}")
    out = []
    for s in ex_speakers:
        v = model.filters_from_embeddings(embeddings[s]).data
        out.append(SpeakerFilter(v, FilterSource.EXTERNAL, s))
    return out


def score(estimates, mixture, references) -> list[tuple[float, float]]:
    """Per reference, (SI-SNR of the aligned estimate, SI-SNR of the mixture)."""
    return [
        (si_snr_value(p.estimate, p.reference), si_snr_value(mixture, p.reference))
        for p in align_outputs(list(estimates), list(references))
    ]


def _check_rate(w, config: dict, path) -> None:
    rate = config.get("sample_rate")
    if rate is not None and w.sample_rate != rate:
        raise UsageError(f"{path}: sample rate {w.sample_rate} Hz, checkpoint expects {rate} Hz")


def cmd_separate(args) -> int:
    mixture = read_wav(args.input)
    baseline, bconf = _load(args.baseline_checkpoint, Separator, "baseline checkpoint")
    _check_rate(mixture, bconf, args.input)
    model = None
    if args.checkpoint:
        model, dconf = _load(args.checkpoint, DPFN, "DPFN checkpoint")
        _check_rate(mixture, dconf, args.input)
    filters = None
    if args.embedding:
        if model is None:
            raise UsageError("--embedding needs a DPFN --checkpoint")
        if model.projection is not None:
            filters = [load_external_embedding(p, model.projection) for p in args.embedding]
        else:
            filters = []
            for p in args.embedding:
                v, label = read_embedding(p)
                if v.size != model.spk_cfg.filter_dim:
                    raise EmbeddingFormatError(f"{p}: length {v.size}, model filters have {model.spk_cfg.filter_dim}")
                filters.append(SpeakerFilter(v, FilterSource.EXTERNAL, label))
    elif model is not None and model.projection is not None:
        raise UsageError("known-speaker checkpoint needs --embedding files")
    if model is None:
        outputs = baseline_separate(mixture, baseline)
    else:
        outputs, _, filters = cascade(mixture, baseline, model, filters)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for j, w in enumerate(outputs):
        write_wav(out / f"speaker{j + 1}.wav", w)
    print(f"wrote {len(outputs)} files to {out}")
    if args.reference:
        refs = [read_wav(p) for p in args.reference]
        for j, (s, m) in enumerate(score(outputs, mixture, refs)):
            rec = {"reference": str(args.reference[j]), "si_snr_db": s, "improvement_db": s - m}
            print(json.dumps(rec, sort_keys=True))
    return 0


def cmd_embed(args) -> int:
    model, conf = _load(args.checkpoint, DPFN, "DPFN checkpoint")
    w = read_wav(args.input)
    _check_rate(w, conf, args.input)
    f = filter_from_waveform(w, model.speaker, args.speaker)
    write_embedding(args.out, f.v, args.speaker)
    print(f"wrote {f.dim}-dim embedding to {args.out}")
    return 0


def evaluate_split(examples, separate_fn, workers: int) -> dict:
    if not examples:
        raise UsageError("split has no mixtures")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        per_example = list(pool.map(lambda ex: score(separate_fn(ex), ex.mixture, ex.sources), examples))
    pairs = [p for ex in per_example for p in ex]
    est = np.array([p[0] for p in pairs])
    mix = np.array([p[1] for p in pairs])
    return {"mean_si_snr_db": float(est.mean()), "improvement_db": float((est - mix).mean()), "count": len(examples)}


def cmd_evaluate(args) -> int:
    data = _require_dir(args.data, "corpus directory")
    systems = []
    if args.oracle:
        systems.append(("oracle", lambda ex: ex.sources))
    baseline = None
    if args.baseline_checkpoint:
        baseline, _ = _load(args.baseline_checkpoint, Separator, "baseline checkpoint")
        systems.append(("baseline", lambda ex: baseline_separate(ex.mixture, baseline)))
    embeddings = _load_embeddings(args.embeddings)
    for path in args.checkpoint or []:
        if baseline is None:
            raise UsageError("DPFN evaluation needs --baseline-checkpoint for the initial separation")
        model, _ = _load(path, DPFN, "DPFN checkpoint")

        def run(ex, model=model):
            return cascade(ex.mixture, baseline, model, _filters_for(model, ex.speaker_ids, embeddings))[0]

        systems.append((model.mode.value, run))
    if not systems:
        raise UsageError("nothing to evaluate; give --baseline-checkpoint, --checkpoint or --oracle")
    rows = []
    for split in args.split:
        if not read_manifest(data, split):
            raise UsageError(f"split {split!r} has no mixtures in {data}")
        examples = load_split(data, split)
        for name, fn in systems:
            rows.append({"split": split, "mode": name, **evaluate_split(examples, fn, args.workers)})
    lines = [json.dumps(r, sort_keys=True) for r in rows]
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"{'split':<6} {'mode':<11} {'SI-SNR dB':>10} {'SI-SNRi dB':>11} {'count':>6}")
    for r in rows:
        print(f"{r['split']:<6} {r['mode']:<11} {r['mean_si_snr_db']:>10.2f} {r['improvement_db']:>11.2f} {r['count']:>6}")
    return 0


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpfn", description="Speaker-conditioned speech separation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required)
        return p

    p = common(sub.add_parser("gen-data", help="build the synthetic corpus"))
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train-baseline", help="train the PIT separator"))
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train_baseline)

    p = common(sub.add_parser("train-dpfn", help="train the speaker-conditioned separator"))
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--mode", choices=[m.value for m in Mode if m is not Mode.NONE], default="both")
    p.add_argument("--phase", choices=sorted(PHASES), default="pretrain-clean")
    p.add_argument("--baseline-checkpoint")
    p.add_argument("--checkpoint", help="initialize from this DPFN checkpoint")
    p.add_argument("--embeddings", help="directory of <speaker>.emb files (known-speaker phase)")
    p.set_defaults(func=cmd_train_dpfn)

    p = common(sub.add_parser("separate", help="separate one mixture WAV"))
    p.add_argument("--input", required=True)
    p.add_argument("--baseline-checkpoint", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--embedding", action="append", help="external embedding file, one per speaker")
    p.add_argument("--reference", action="append", help="clean reference WAV, one per speaker")
    p.set_defaults(func=cmd_separate)

    p = common(sub.add_parser("evaluate", help="SI-SNR report over corpus splits"), out_required=False)
    p.add_argument("--data", required=True)
    p.add_argument("--split", action="append", choices=["train", "dev", "eval"])
    p.add_argument("--baseline-checkpoint")
    p.add_argument("--checkpoint", action="append", help="DPFN checkpoint; repeat for several modes")
    p.add_argument("--embeddings")
    p.add_argument("--oracle", action="store_true", help="also score the references themselves")
    p.add_argument("--workers", type=int, default=2)
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("embed", help="write the speaker filter of a clean WAV"))
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--speaker", help="speaker label stored in the file header")
    p.set_defaults(func=cmd_embed)
    return parser


ERROR_PREFIXES = [
    (UsageError, "dpfn: usage error"),
    (CheckpointError, "dpfn: checkpoint error"),
    (WavFormatError, "dpfn: wav error"),
    (EmbeddingFormatError, "dpfn: embedding error"),
    (OSError, "dpfn: io error"),
    (ValueError, "dpfn: invalid input"),
    (KeyError, "dpfn: invalid input"),
    (IndexError, "dpfn: invalid input"),
]


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "evaluate" and not args.split:
        args.split = ["eval"]
    try:
        return args.func(args)
    except Exception as exc:
        for cls, prefix in ERROR_PREFIXES:
            if isinstance(exc, cls):
                print(f"{prefix}: {exc}", file=sys.stderr)
                return 1
        raise


if __name__ == "__main__":
    sys.exit(main())
