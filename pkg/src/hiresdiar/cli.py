"""Command-line surface: synthesize, pretrain, train, diarize, score, stats.

One binary with subcommands over a shared layered configuration
(defaults < ``--config`` file < ``HIRESDIAR_*`` environment < flags), so
ablation studies are single-flag deltas. Every run directory receives a
``run_manifest.json`` with the fully resolved configuration and SHA-256
hashes of inputs and outputs. Exit codes: 0 success, 1 user error,
2 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import traceback
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import RunConfig, UserError, load_config
from .corpus import SpeakerCorpus, synthetic_corpus
from .model import hee_from_checkpoint, load_checkpoint
from .pipeline import Diarizer, VoicedSegment, segments_from_reference
from .scoring import (
    DERResult,
    RttmRecord,
    compute_der,
    compute_der_framewise,
    dataset_stats,
    parse_rttm,
    write_rttm,
)
from .synthesis import MixtureSynthesizer
from .training import pretrain_backbone, train_hee


class _Parser(argparse.ArgumentParser):
    """argparse reports usage problems as user errors (exit 1, not 2)."""

    def error(self, message):
        raise UserError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Shared plumbing.
# ---------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(run_dir: Path, command: str, config: RunConfig,
                    inputs: dict[str, Path], outputs: list[Path],
                    notes: dict | None = None) -> Path:
    payload = {
        "command": command,
        "config": config.resolved(),
        "inputs": {name: {"path": str(p), "sha256": _sha256(Path(p))}
                   for name, p in inputs.items()},
        "outputs": [{"path": str(Path(p).relative_to(run_dir)), "sha256": _sha256(Path(p))}
                    for p in outputs],
        "notes": notes or {},
    }
    path = run_dir / "run_manifest.json"
    tmp = run_dir / "run_manifest.json.tmp"
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def _add_shared(parser: argparse.ArgumentParser, needs_run_dir: bool = True) -> None:
    parser.add_argument("--config", help="plain-text config file (key = value lines)")
    parser.add_argument("--seed", type=int, help="base random seed")
    parser.add_argument("--workers", type=int, help="parallel workers for synthesis")
    parser.add_argument("--run-dir", required=needs_run_dir,
                        help="output directory for artifacts and the run manifest")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any declared config key")


_FLAG_KEYS = {
    "seed": "seed", "workers": "workers",
    "mixture_dur": "mixture_dur_s", "epochs": "epochs",
    "freeze_epochs": "freeze_epochs", "batches_per_epoch": "batches_per_epoch",
    "batch_size": "batch_size", "lr": "lr",
    "pretrain_steps": "pretrain_steps",
    "window": "window_s", "shift": "shift_s",
    "eig_threshold": "eig_threshold", "max_speakers": "max_speakers",
    "noise_dir": "noise_dir", "rir_dir": "rir_dir",
}
_NEGATED_KEYS = {"no_shuffle": "shuffle", "no_specaug": "specaug",
                 "no_augment": "augment", "no_refine": "refine.enabled"}


def _resolve_config(args) -> RunConfig:
    overrides: dict[str, object] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UserError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    for attr, key in _NEGATED_KEYS.items():
        if getattr(args, attr, False):
            overrides[key] = False
    return load_config(args.config, None, overrides)


def _run_dir(args) -> Path:
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _load_corpus(args, config: RunConfig) -> tuple[SpeakerCorpus, dict]:
    """Corpus from a manifest file, or the packaged synthetic voices."""
    if args.corpus:
        path = Path(args.corpus)
        if not path.is_file():
            raise UserError(f"corpus manifest not found: {path}")
        return SpeakerCorpus.from_manifest(path), {"corpus": str(path)}
    corpus, _ = synthetic_corpus(n_speakers=args.synthetic_speakers,
                                 utterances_per_speaker=args.synthetic_utterances,
                                 seed=config["seed"])
    return corpus, {"corpus": "synthetic",
                    "synthetic_speakers": args.synthetic_speakers,
                    "synthetic_utterances": args.synthetic_utterances}


def _add_corpus_flags(parser) -> None:
    parser.add_argument("--corpus", help="speaker<TAB>wav manifest file")
    parser.add_argument("--synthetic-speakers", type=int, default=8,
                        help="synthetic corpus size when no manifest is given")
    parser.add_argument("--synthetic-utterances", type=int, default=12,
                        help="utterances per synthetic speaker")


def _add_ablation_flags(parser) -> None:
    parser.add_argument("--no-shuffle", action="store_true",
                        help="disable block shuffling")
    parser.add_argument("--no-specaug", action="store_true",
                        help="disable frequency masking")
    parser.add_argument("--no-augment", action="store_true",
                        help="disable noise/reverberation passes")
    parser.add_argument("--mixture-dur", type=float, help="mixture duration in seconds")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

_SHARD_SAMPLES = 1024


def cmd_synth(args) -> int:
    config = _resolve_config(args)
    run_dir = _run_dir(args)
    corpus, corpus_note = _load_corpus(args, config)
    if args.num < 1:
        raise UserError("--num must be >= 1")
    synth = MixtureSynthesizer(corpus, config.synthesis_config(),
                               config.feature_config(), seed=config["seed"])

    workers = config["workers"]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_mixture = list(pool.map(synth.mixture, range(args.num),
                                        chunksize=max(1, args.num // (workers * 4))))
    else:
        per_mixture = [synth.mixture(i) for i in range(args.num)]
    samples = [s for group in per_mixture for s in group]

    outputs: list[Path] = []
    index_path = run_dir / "samples.jsonl"
    with index_path.open("w") as index:
        for shard_no in range(0, len(samples), _SHARD_SAMPLES):
            chunk = samples[shard_no:shard_no + _SHARD_SAMPLES]
            shard = run_dir / f"shard-{shard_no // _SHARD_SAMPLES:05d}.npz"
            np.savez(shard,
                     features=np.stack([s.features for s in chunk]),
                     labels=np.stack([s.labels for s in chunk]).astype(np.int64),
                     mixture_index=np.array([s.mixture_index for s in chunk]),
                     part=np.array([s.part for s in chunk]))
            outputs.append(shard)
            for row, sample in enumerate(chunk):
                index.write(json.dumps({
                    "sample": shard_no + row, "shard": shard.name, "row": row,
                    "mixture": sample.mixture_index, "part": sample.part,
                    "speakers": list(sample.speaker_ids),
                }) + "\n")
    outputs.append(index_path)

    _write_manifest(run_dir, "synth", config, inputs={}, outputs=outputs,
                    notes={**corpus_note, "n_mixtures": args.num,
                           "n_samples": len(samples)})
    print(f"wrote {len(samples)} samples from {args.num} mixtures to {run_dir}")
    return 0


# ---------------------------------------------------------------------------
# pretrain / train
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    config = _resolve_config(args)
    run_dir = _run_dir(args)
    corpus, corpus_note = _load_corpus(args, config)
    path = pretrain_backbone(corpus, config.model_config(), config.train_config(),
                             run_dir, config.feature_config())
    _write_manifest(run_dir, "pretrain", config, inputs={}, outputs=[path],
                    notes={**corpus_note, "n_speakers": corpus.n_speakers})
    print(f"wrote pretrained backbone to {path}")
    return 0


def cmd_train(args) -> int:
    config = _resolve_config(args)
    run_dir = _run_dir(args)
    corpus, corpus_note = _load_corpus(args, config)

    inputs: dict[str, Path] = {}
    if args.backbone:
        backbone_path = Path(args.backbone)
        if not backbone_path.is_file():
            raise UserError(f"backbone checkpoint not found: {backbone_path}")
    elif args.pretrain:
        backbone_path = pretrain_backbone(corpus, config.model_config(),
                                          config.train_config(), run_dir,
                                          config.feature_config())
    else:
        raise UserError("provide --backbone CHECKPOINT or request --pretrain")
    inputs["backbone"] = backbone_path
    try:
        pretrained = load_checkpoint(backbone_path)
    except ValueError as exc:
        raise UserError(str(exc)) from exc

    synth = MixtureSynthesizer(corpus, config.synthesis_config(),
                               config.feature_config(), seed=config["seed"])
    train_path, infer_path = train_hee(
        synth, corpus.n_speakers, config.model_config(), config.train_config(),
        run_dir, pretrained=pretrained, resume=args.resume)
    _write_manifest(run_dir, "train", config, inputs=inputs,
                    outputs=[train_path, infer_path, run_dir / "train_log.jsonl"],
                    notes={**corpus_note, "n_speakers": corpus.n_speakers})
    print(f"wrote inference checkpoint to {infer_path}")
    return 0


# ---------------------------------------------------------------------------
# diarize
# ---------------------------------------------------------------------------

def _load_segment_sources(path: Path) -> tuple[dict[str, list[VoicedSegment]] | None,
                                               list[VoicedSegment] | None]:
    """RTTM → per-session segment map; plain text → one shared segment list."""
    if path.suffix.lower() == ".rttm":
        records = parse_rttm(path)
        by_session: dict[str, list[RttmRecord]] = {}
        for r in records:
            by_session.setdefault(r.session, []).append(r)
        return ({s: segments_from_reference(rs) for s, rs in by_session.items()}, None)
    segments = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise UserError(f"{path}:{lineno}: expected 'start<TAB>end'")
        try:
            segments.append(VoicedSegment(float(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise UserError(f"{path}:{lineno}: {exc}") from exc
    return None, segments


def cmd_diarize(args) -> int:
    config = _resolve_config(args)
    run_dir = _run_dir(args)
    model_path = Path(args.model)
    if not model_path.is_file():
        raise UserError(f"model checkpoint not found: {model_path}")
    try:
        model = hee_from_checkpoint(load_checkpoint(model_path))
    except ValueError as exc:
        raise UserError(str(exc)) from exc

    segments_path = Path(args.segments)
    if not segments_path.is_file():
        raise UserError(f"segment file not found: {segments_path}")
    per_session, shared = _load_segment_sources(segments_path)
    if shared is not None and len(args.wav) != 1:
        raise UserError("a plain start/end segment file applies to exactly one wav")

    from .features import load_wav  # deferred: touches scipy.io

    diarizer = Diarizer(model, config.feature_config(), config.pipeline_config())
    inputs = {"model": model_path, "segments": segments_path}
    outputs = []
    for wav_arg in args.wav:
        wav_path = Path(wav_arg)
        if not wav_path.is_file():
            raise UserError(f"audio file not found: {wav_path}")
        session = wav_path.stem
        inputs[f"wav:{session}"] = wav_path
        segments = shared if shared is not None else per_session.get(session, [])
        out_path = run_dir / f"{session}.rttm"
        if not segments:
            warnings.warn(f"no voiced segments for session {session}; writing empty RTTM")
            out_path.write_text("")
            outputs.append(out_path)
            continue
        waveform = load_wav(wav_path, target_rate=config["sample_rate"])
        result = diarizer.diarize(waveform, segments, num_speakers=args.num_speakers)
        write_rttm(result.to_rttm(session), out_path)
        outputs.append(out_path)
        print(f"{session}: {result.n_speakers} speakers, "
              f"{len(result.intervals)} intervals -> {out_path}")

    _write_manifest(run_dir, "diarize", config, inputs=inputs, outputs=outputs)
    return 0


# ---------------------------------------------------------------------------
# score / stats
# ---------------------------------------------------------------------------

def _der_row(name: str, r: DERResult) -> str:
    return (f"{name:<20} {r.total_s:>9.2f} {100 * r.der:>8.2f} {100 * r.falarm_rate:>8.2f} "
            f"{100 * r.miss_rate:>8.2f} {100 * r.confusion_rate:>8.2f}")


def cmd_score(args) -> int:
    config = _resolve_config(args)
    try:
        reference = parse_rttm(Path(args.ref))
        hypothesis = parse_rttm(Path(args.hyp))
    except (OSError, ValueError) as exc:
        raise UserError(str(exc)) from exc
    scorer = compute_der_framewise if args.framewise else compute_der
    try:
        result = scorer(reference, hypothesis)
    except ValueError as exc:
        raise UserError(str(exc)) from exc

    header = (f"{'session':<20} {'ref_s':>9} {'DER%':>8} {'FA%':>8} "
              f"{'MS%':>8} {'SC%':>8}")
    print(header)
    for session in sorted(result.per_session):
        print(_der_row(session, result.per_session[session]))
    print(_der_row("ALL", result))

    if args.run_dir:
        run_dir = _run_dir(args)
        report = run_dir / "score_report.jsonl"
        with report.open("w") as fh:
            for session in sorted(result.per_session):
                r = result.per_session[session]
                fh.write(json.dumps({
                    "session": session, "ref_s": round(r.total_s, 6),
                    "der": round(r.der, 6), "fa": round(r.falarm_rate, 6),
                    "ms": round(r.miss_rate, 6), "sc": round(r.confusion_rate, 6),
                }) + "\n")
            fh.write(json.dumps({
                "session": "ALL", "ref_s": round(result.total_s, 6),
                "der": round(result.der, 6), "fa": round(result.falarm_rate, 6),
                "ms": round(result.miss_rate, 6), "sc": round(result.confusion_rate, 6),
            }) + "\n")
        _write_manifest(run_dir, "score", config,
                        inputs={"ref": Path(args.ref), "hyp": Path(args.hyp)},
                        outputs=[report])
    return 0


def cmd_stats(args) -> int:
    config = _resolve_config(args)
    try:
        records = parse_rttm(Path(args.ref))
        stats = dataset_stats(records)
    except (OSError, ValueError) as exc:
        raise UserError(str(exc)) from exc
    width = max(len(k) for k in stats)
    for key, value in stats.items():
        print(f"{key:<{width}}  {value}")
    if args.run_dir:
        run_dir = _run_dir(args)
        report = run_dir / "stats.json"
        report.write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
        _write_manifest(run_dir, "stats", config,
                        inputs={"ref": Path(args.ref)}, outputs=[report])
    return 0


# ---------------------------------------------------------------------------
# Parser assembly and entry point.
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hiresdiar",
                     description="High-resolution speaker diarization toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth",
                       help="write mixture-sample shards and a sample manifest")
    _add_shared(p)
    _add_corpus_flags(p)
    _add_ablation_flags(p)
    p.add_argument("--num", type=int, required=True, help="number of mixtures")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain",
                       help="stage 1: train the pooled utterance classifier")
    _add_shared(p)
    _add_corpus_flags(p)
    p.add_argument("--pretrain-steps", type=int, dest="pretrain_steps")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train",
                       help="stage 2: train the high-resolution extractor")
    _add_shared(p)
    _add_corpus_flags(p)
    _add_ablation_flags(p)
    p.add_argument("--backbone", help="stage-1 checkpoint to start from")
    p.add_argument("--pretrain", action="store_true",
                   help="run stage 1 first inside this run directory")
    p.add_argument("--resume", action="store_true",
                   help="continue from the run directory's training state")
    p.add_argument("--epochs", type=int)
    p.add_argument("--freeze-epochs", type=int, dest="freeze_epochs")
    p.add_argument("--batches-per-epoch", type=int, dest="batches_per_epoch")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("diarize",
                       help="run the diarization pipeline over sessions")
    _add_shared(p)
    p.add_argument("--model", required=True, help="inference checkpoint")
    p.add_argument("--wav", action="append", required=True,
                   help="session audio (repeatable; session id = file stem)")
    p.add_argument("--segments", required=True,
                   help="voiced segments: reference RTTM or start/end lines")
    p.add_argument("--num-speakers", type=int, dest="num_speakers",
                   help="fix the speaker count instead of estimating it")
    p.add_argument("--window", type=float, help="extraction window seconds")
    p.add_argument("--shift", type=float, help="extraction shift seconds")
    p.add_argument("--no-refine", action="store_true",
                   help="bypass the embedding-refinement stage")
    p.add_argument("--eig-threshold", type=float, dest="eig_threshold")
    p.add_argument("--max-speakers", type=int, dest="max_speakers")
    p.set_defaults(func=cmd_diarize)

    p = sub.add_parser("score",
                       help="score hypothesis RTTM against reference RTTM")
    _add_shared(p, needs_run_dir=False)
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--framewise", action="store_true",
                   help="use the frame-sampled cross-check scorer")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("stats",
                       help="summarize a reference RTTM")
    _add_shared(p, needs_run_dir=False)
    p.add_argument("--ref", required=True)
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
