"""Command-line workflow: prepare-synth, train, convert, evaluate, report.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np
import tomli
import torch

from .data import FeatureSet, ManifestEntry, load_manifest, resolve_clip, write_manifest
from .evaluation import TemplateRecognizer, evaluate, rows_from_jsonl, summary_table
from .generator import generate
from .signal import (
    MelSpectrogram,
    SynthCorpusConfig,
    compute_mel,
    estimate_f0,
    extract_formants,
    formant_statistics,
    invert_mel,
    read_wav,
    synth_corpus,
    write_wav,
)
from .training import NeutralState, TrainingConfig, fit, load_checkpoint, save_checkpoint

log = logging.getLogger("neutralvoice")

SEED_ENV = "RASO_SEED"


class UsageError(Exception):
    pass


@dataclasses.dataclass(frozen=True)
class RunConfig:
    training: TrainingConfig = TrainingConfig()
    synth: SynthCorpusConfig = SynthCorpusConfig()
    manifest: str | None = None
    checkpoint: str | None = None
    report_dir: str | None = None
    attack_train_clips: int = 600
    finetune_epochs: int = 4
    gl_iterations: int = 60


def load_config(path=None) -> RunConfig:
    """Flat TOML: TrainingConfig keys and paths at top level, an optional [synth] table."""
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise UsageError(f"config not found: {path}")
        with open(path, "rb") as f:
            raw = tomli.load(f)
    synth_raw = raw.pop("synth", {})
    train_keys = {f.name for f in dataclasses.fields(TrainingConfig)}
    run_keys = {f.name for f in dataclasses.fields(RunConfig)} - {"training", "synth"}
    unknown = set(raw) - train_keys - run_keys
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for key in ("class_f0_mean_hz", "class_f0_std_hz"):
        if key in synth_raw:
            synth_raw[key] = tuple(synth_raw[key])
    if "class_formant_offsets_hz" in synth_raw:
        synth_raw["class_formant_offsets_hz"] = tuple(tuple(v) for v in synth_raw["class_formant_offsets_hz"])
    training = TrainingConfig(**{k: v for k, v in raw.items() if k in train_keys})
    if SEED_ENV in os.environ:
        training = dataclasses.replace(training, seed=int(os.environ[SEED_ENV]))
    return RunConfig(training=training, synth=SynthCorpusConfig(**synth_raw),
                     **{k: v for k, v in raw.items() if k in run_keys})


def _split_of(i: int) -> str:
    # pairs of clips (one per sex) share a split, so every split is balanced
    k = (i // 2) % 10
    return "train" if k < 7 else "valid" if k == 7 else "eval"


def prepare_synth(out_dir, cfg: SynthCorpusConfig) -> Path:
    out_dir = Path(out_dir)
    clip_dir = out_dir / "clips"
    clip_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, utt in enumerate(synth_corpus(cfg)):
        name = f"clips/synth_{i:05d}.wav"
        tmp = out_dir / (name + ".tmp")
        write_wav(tmp, utt.clip)
        os.replace(tmp, out_dir / name)
        entries.append(ManifestEntry(name, f"spk{i:05d}", "MF"[utt.sex], _split_of(i), utt.tokens))
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, entries)
    log.info("wrote %d clips to %s", len(entries), out_dir)
    return manifest


def load_splits(manifest) -> dict[str, FeatureSet]:
    entries = load_manifest(manifest)
    clips = {e.clip_path: read_wav(resolve_clip(manifest, e)) for e in entries}
    n_frames = min(compute_mel(c).n_frames for c in clips.values())
    out = {}
    for split in ("train", "valid", "eval"):
        sel = [e for e in entries if e.split == split]
        if not sel:
            raise ValueError(f"{manifest}: split {split!r} is empty")
        out[split] = FeatureSet.from_clips([clips[e.clip_path] for e in sel], [e.label for e in sel],
                                           [e.clip_path for e in sel], [e.transcript for e in sel], n_frames)
    out["train_clips"] = [clips[e.clip_path] for e in entries if e.split == "train"]
    return out


def corpus_formant_moments(clips):
    return formant_statistics([extract_formants(c) for c in clips])


def train(cfg: RunConfig, manifest, checkpoint, log_path=None):
    splits = load_splits(manifest)
    neutral = NeutralState(formant_moments=corpus_formant_moments(splits["train_clips"]))
    state = fit(cfg.training, splits["train"], splits["valid"], neutral=neutral, log_path=log_path)
    save_checkpoint(checkpoint, state)
    log.info("checkpoint written to %s (best epoch %d)", checkpoint, getattr(state, "best_epoch", state.epoch))
    return state


def convert_file(state, src, dst, sex: str | None = None, gl_iterations: int = 60) -> None:
    clip = read_wav(src)
    mel = compute_mel(clip)
    if sex is None:
        label = int(state.classifier.classify(mel.values[None])[0] <= 0.5)
    else:
        label = {"M": 0, "F": 1}[sex]
    out = generate(state.generator, mel, label, estimate_f0(clip), state.neutral.mu_neutral_hz)
    audio = invert_mel(MelSpectrogram(out.values), gl_iterations)
    dst = Path(dst)
    tmp = dst.with_name(dst.name + ".tmp")
    write_wav(tmp, audio)
    os.replace(tmp, dst)


def run_evaluation(cfg: RunConfig, manifest, checkpoint, report_dir):
    state = load_checkpoint(checkpoint)
    if state.neutral.formant_moments is None:
        raise ValueError(f"{checkpoint}: checkpoint has no neutral formant moments")
    splits = load_splits(manifest)
    train_set = splits["train"]
    attack_idx = np.arange(len(train_set))[: cfg.attack_train_clips]
    recognizer = TemplateRecognizer(n_tokens=cfg.synth.vowels_per_clip).fit(train_set.mels, train_set.transcripts)
    result = evaluate(state.generator, state.neutral.mu_neutral_hz, state.neutral.formant_moments,
                      state.classifier, train_set.subset(attack_idx), splits["eval"], recognizer,
                      finetune_epochs=cfg.finetune_epochs, seed=cfg.training.seed,
                      gl_iterations=cfg.gl_iterations)
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    _atomic_text(report_dir / "reports.jsonl", result.to_jsonl())
    _atomic_text(report_dir / "table.txt", summary_table(result.table_rows()) + "\n")
    return result


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _require(value, flag):
    if value is None:
        raise UsageError(f"{flag} is required (or set it in the config file)")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neutralvoice", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="command")

    s = sub.add_parser("prepare-synth", help="write a synthetic two-class corpus and its manifest")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config")
    s.add_argument("--n-clips", type=int)

    s = sub.add_parser("train", help="train a generator from a manifest")
    s.add_argument("--manifest")
    s.add_argument("--ckpt", help="checkpoint path to write")
    s.add_argument("--config")
    s.add_argument("--log", help="per-step loss log (JSON lines)")

    s = sub.add_parser("convert", help="obfuscate WAV file(s)")
    s.add_argument("--in", dest="inputs", action="append", required=True, help="input WAV (repeatable)")
    s.add_argument("--out", help="output WAV for a single input")
    s.add_argument("--out-dir", help="output directory for several inputs")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--sex", choices=("M", "F"), help="source sex; inferred by the proxy classifier if omitted")
    s.add_argument("--config")

    s = sub.add_parser("evaluate", help="run both attacks, neutrality and WER")
    s.add_argument("--manifest")
    s.add_argument("--ckpt")
    s.add_argument("--out-dir", help="report directory")
    s.add_argument("--config")

    s = sub.add_parser("report", help="render the summary table from reports.jsonl")
    s.add_argument("--reports", required=True)
    return p


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _dispatch(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, FloatingPointError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "report":
        path = Path(args.reports)
        if not path.exists():
            raise FileNotFoundError(f"reports not found: {path}")
        print(summary_table(rows_from_jsonl(path.read_text())))
        return 0

    cfg = load_config(args.config)
    torch.manual_seed(cfg.training.seed)
    if args.command == "prepare-synth":
        synth = cfg.synth if args.n_clips is None else dataclasses.replace(cfg.synth, n_clips=args.n_clips)
        print(prepare_synth(args.out, synth))
    elif args.command == "train":
        train(cfg, _require(args.manifest or cfg.manifest, "--manifest"),
              _require(args.ckpt or cfg.checkpoint, "--ckpt"), args.log)
    elif args.command == "convert":
        if len(args.inputs) == 1 and args.out:
            pairs = [(args.inputs[0], args.out)]
        elif args.out_dir:
            Path(args.out_dir).mkdir(parents=True, exist_ok=True)
            pairs = [(src, Path(args.out_dir) / Path(src).name) for src in args.inputs]
        else:
            raise UsageError("use --out with one input or --out-dir with several")
        for src, dst in pairs:
            if Path(src).resolve() == Path(dst).resolve():
                raise UsageError(f"refusing to overwrite input {src}")
        state = load_checkpoint(args.ckpt)
        for src, dst in pairs:
            convert_file(state, src, dst, args.sex, cfg.gl_iterations)
    elif args.command == "evaluate":
        result = run_evaluation(cfg, _require(args.manifest or cfg.manifest, "--manifest"),
                                _require(args.ckpt or cfg.checkpoint, "--ckpt"),
                                _require(args.out_dir or cfg.report_dir, "--out-dir"))
        print(summary_table(result.table_rows()))
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
