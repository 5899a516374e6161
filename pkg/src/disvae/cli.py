"""Command-line entry point: ``disvae <command> [options]``.

Commands: features, train, convert, eval, embed, toy-corpus. Every command
accepts ``--config FILE``, a JSON document with optional sections ``dsp``,
``model``, ``train`` and ``paths``; unknown sections or keys are rejected.
Command-line flags override config values. Exit status is 0 on success, 1 on
a validation error (bad flags, bad config, missing inputs) and 2 when the
work itself fails.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import conversion, data, dsp, evaluation, toy, trainer
from .checkpoint import load_checkpoint
from .errors import ConfigError, DisVAEError
from .model import ModelConfig

log = logging.getLogger("disvae")

DSP_KEYS = {"fft_size", "hop", "fmin", "fmax"}
MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} | {"preset"}
TRAIN_KEYS = {f.name for f in dataclasses.fields(trainer.TrainConfig)}
PATH_KEYS = {"corpus", "manifest", "out", "stats", "split", "ckpt"}
SECTIONS = {"dsp": DSP_KEYS, "model": MODEL_KEYS, "train": TRAIN_KEYS, "paths": PATH_KEYS}


class ValidationError(Exception):
    """Bad user input; reported with exit status 1."""


@dataclasses.dataclass
class CliConfig:
    dsp: dsp.SpectrogramConfig
    model: ModelConfig
    train: trainer.TrainConfig
    paths: dict


def load_config(path=None) -> CliConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ValidationError(f"--config: cannot read {path}: {exc}") from exc
        except ValueError as exc:
            raise ValidationError(f"--config: {path} is not valid JSON: {exc}") from exc
    return parse_config(doc, str(path))


def parse_config(doc, source: str = "<config>") -> CliConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    for section, value in doc.items():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section {section!r} (expected one of {sorted(SECTIONS)})")
        if not isinstance(value, dict):
            raise ConfigError(f"{source}: section {section!r} must be an object")
        unknown = set(value) - SECTIONS[section]
        if unknown:
            raise ConfigError(f"{source}: unknown key(s) in {section!r}: {sorted(unknown)}")
    try:
        spec_cfg = dsp.SpectrogramConfig(**doc.get("dsp", {}))
        model_doc = dict(doc.get("model", {}))
        preset = model_doc.pop("preset", "full")
        if preset not in ("full", "toy"):
            raise ConfigError(f"{source}: model.preset must be 'full' or 'toy', got {preset!r}")
        model_cfg = ModelConfig.toy(**model_doc) if preset == "toy" else ModelConfig(**model_doc)
        train_cfg = trainer.TrainConfig(**doc.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return CliConfig(spec_cfg, model_cfg, train_cfg, dict(doc.get("paths", {})))


def _path(args, cfg: CliConfig, name: str, flag: str, must_exist: bool = True) -> Path:
    value = getattr(args, name, None) or cfg.paths.get(name)
    if value is None:
        raise ValidationError(f"{flag} is required (or set paths.{name} in the config)")
    p = Path(value)
    if must_exist and not p.exists():
        raise ValidationError(f"{flag}: {p} does not exist")
    return p


def _stats(args, cfg: CliConfig, required: bool = True):
    value = args.stats or cfg.paths.get("stats")
    if value is None:
        if required:
            raise ValidationError("--stats is required (or set paths.stats in the config)")
        return None
    if not Path(value).exists():
        raise ValidationError(f"--stats: {value} does not exist")
    return dsp.load_stats(value)


# ---------------------------------------------------------------------------
# commands


def cmd_features(args, cfg: CliConfig) -> int:
    corpus = _path(args, cfg, "corpus", "--corpus")
    out = _path(args, cfg, "out", "--out", must_exist=False)
    split = args.split or cfg.paths.get("split")
    if split is not None and not Path(split).exists():
        raise ValidationError(f"--split: {split} does not exist")
    manifest = data.scan_corpus(corpus, split)
    fb = dsp.build_mel_filterbank(cfg.dsp)
    feats, stats = data.precompute_features(manifest, cfg.dsp, fb, out, on_error=args.on_error)
    log.info("wrote %d feature files, stats min %.4f max %.4f",
             sum(len(s.utterances) for s in feats.speakers), stats.min_val, stats.max_val)
    return 0


def cmd_train(args, cfg: CliConfig) -> int:
    manifest_path = _path(args, cfg, "manifest", "--manifest")
    out = _path(args, cfg, "out", "--out", must_exist=False)
    resume = args.resume
    if resume is not None and not Path(resume).exists():
        raise ValidationError(f"--resume: {resume} does not exist")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["total_steps"] = args.steps
    try:
        train_cfg = dataclasses.replace(cfg.train, **overrides)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    manifest = data.CorpusManifest.load(manifest_path)
    final = trainer.train_loop(manifest, cfg.model, train_cfg, out, resume=resume)
    log.info("final checkpoint %s", final)
    return 0


def _normalized_mel(path: Path, cfg: CliConfig, fb, stats) -> dsp.MelSpectrogram:
    if path.suffix.lower() == ".dvf":
        m = dsp.load_features(path)
        if not m.normalized:
            raise ValidationError(f"{path}: feature file is not normalized")
        return m
    if stats is None:
        raise ValidationError(f"{path}: WAV input needs --stats")
    return dsp.normalize(dsp.wav_to_logmel(dsp.load_wav(path), cfg.dsp, fb), stats)


def cmd_convert(args, cfg: CliConfig) -> int:
    ckpt = _path(args, cfg, "ckpt", "--ckpt")
    source = Path(args.source)
    if not source.exists():
        raise ValidationError(f"--source: {source} does not exist")
    for ref in args.target_ref:
        if not Path(ref).exists():
            raise ValidationError(f"--target-ref: {ref} does not exist")
    out = _path(args, cfg, "out", "--out", must_exist=False)
    stats = _stats(args, cfg)
    fb = dsp.build_mel_filterbank(cfg.dsp)
    model, _ = load_checkpoint(ckpt)
    refs = [_normalized_mel(Path(r), cfg, fb, stats) for r in args.target_ref]
    emb = conversion.extract_speaker_embedding(refs, model)
    converted = conversion.convert(_normalized_mel(source, cfg, fb, stats), emb, model)
    seed = args.seed if args.seed is not None else cfg.train.seed
    wave_out = dsp.griffin_lim(dsp.denormalize(converted, stats), cfg.dsp, fb, args.iterations, seed=seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    dsp.write_wav(out, wave_out)
    dsp.save_features(out.with_suffix(".dvf"), converted)
    log.info("wrote %s (%.2f s) and %s", out, wave_out.duration, out.with_suffix(".dvf"))
    return 0


def read_pairs_csv(path) -> list[tuple[str, str]]:
    """Rows "ref,conv"; a header row with exactly those names is skipped."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if rows and [c.strip() for c in rows[0]] == ["ref", "conv"]:
        rows = rows[1:]
    pairs = []
    for n, r in enumerate(rows, 1):
        if len(r) != 2:
            raise ValidationError(f"--pairs: row {n} needs two columns (ref,conv), got {r}")
        pairs.append((r[0].strip(), r[1].strip()))
    return pairs


def cmd_eval(args, cfg: CliConfig) -> int:
    pairs_path = Path(args.pairs)
    if not pairs_path.exists():
        raise ValidationError(f"--pairs: {pairs_path} does not exist")
    out = _path(args, cfg, "out", "--out", must_exist=False)
    base = pairs_path.parent
    pairs = [(str(base / r), str(base / c)) for r, c in read_pairs_csv(pairs_path)]
    report = evaluation.evaluate_corpus(pairs, cfg.dsp, out=out)
    log.info("%d pairs, MCD mean %.4f dB std %.4f dB", len(report.rows), report.mean, report.std)
    return 0


def cmd_embed(args, cfg: CliConfig) -> int:
    ckpt = _path(args, cfg, "ckpt", "--ckpt")
    corpus = _path(args, cfg, "corpus", "--corpus")
    out = _path(args, cfg, "out", "--out", must_exist=False)
    stats = _stats(args, cfg, required=False)
    fb = dsp.build_mel_filterbank(cfg.dsp)
    model, _ = load_checkpoint(ckpt)
    manifest = data.scan_corpus(corpus, {})
    rows = []
    for spk in manifest.speakers:
        for utt in spk.utterances:
            m = _normalized_mel(Path(utt), cfg, fb, stats)
            try:
                emb = conversion.extract_speaker_embedding([m], model, spk.speaker_id)
            except DisVAEError as exc:
                log.warning("skipping %s: %s", utt, exc)
                continue
            rows.append((spk.speaker_id, data.utterance_id(utt), emb.vector))
    conversion.write_embeddings_csv(out, rows)
    log.info("wrote %d embeddings to %s", len(rows), out)
    return 0


def cmd_toy_corpus(args, cfg: CliConfig) -> int:
    out = _path(args, cfg, "out", "--out", must_exist=False)
    toy.make_toy_corpus(out, args.utterances, args.content_offset)
    log.info("wrote toy corpus to %s", out)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="disvae", description="Disentangled-VAE voice conversion toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug-level logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", metavar="FILE", help="JSON config with dsp/model/train/paths sections")

    p = sub.add_parser("features", help="compute normalized log-mel caches and corpus stats")
    common(p)
    p.add_argument("--corpus", metavar="DIR", help="root/<speaker>/<utterance>.wav")
    p.add_argument("--out", metavar="DIR", help="output directory for .dvf files, stats.dvs, manifest.json")
    p.add_argument("--split", metavar="FILE", help='speaker split file, lines "<speaker_id> <train|test>"')
    p.add_argument("--on-error", choices=("abort", "continue"), default="abort",
                   help="what to do with unreadable WAVs (default: abort)")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train the model on a feature manifest")
    common(p)
    p.add_argument("--manifest", metavar="FILE", help="manifest.json written by 'features'")
    p.add_argument("--out", metavar="DIR", help="directory for checkpoints and loss.csv")
    p.add_argument("--resume", metavar="CKPT", help="continue from this checkpoint")
    p.add_argument("--seed", type=int, help="random seed (overrides train.seed)")
    p.add_argument("--steps", type=int, help="total training steps (overrides train.total_steps)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="convert a source utterance to a target speaker")
    common(p)
    p.add_argument("--ckpt", metavar="FILE", help="model checkpoint")
    p.add_argument("--source", metavar="WAV", required=True, help="source utterance (.wav or normalized .dvf)")
    p.add_argument("--target-ref", metavar="WAV", nargs="+", required=True,
                   help="one or more reference utterances of the target speaker")
    p.add_argument("--out", metavar="WAV", help="converted audio; the mel is dumped next to it as .dvf")
    p.add_argument("--stats", metavar="FILE", help="stats.dvs written by 'features'")
    p.add_argument("--iterations", type=int, default=60, help="Griffin-Lim iterations (default: 60)")
    p.add_argument("--seed", type=int, help="Griffin-Lim phase seed (overrides train.seed)")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("eval", help="MCD report for (reference, converted) WAV pairs")
    common(p)
    p.add_argument("--pairs", metavar="CSV", required=True,
                   help='rows "ref,conv"; relative paths resolve against the CSV location')
    p.add_argument("--out", metavar="CSV", help="report with per-pair MCD plus MEAN and STD rows")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", help="export one speaker embedding per utterance as CSV")
    common(p)
    p.add_argument("--ckpt", metavar="FILE", help="model checkpoint")
    p.add_argument("--corpus", metavar="DIR", help="root/<speaker>/<utterance>.wav|.dvf")
    p.add_argument("--out", metavar="CSV", help="speaker_id,utterance_id,e1..e8")
    p.add_argument("--stats", metavar="FILE", help="stats.dvs, needed when the corpus holds WAVs")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("toy-corpus", help="write the synthetic two-speaker corpus")
    common(p)
    p.add_argument("--out", metavar="DIR", help="output root")
    p.add_argument("--utterances", type=int, default=10, help="utterances per speaker (default: 10)")
    p.add_argument("--content-offset", type=int, default=0, help="first content id (default: 0)")
    p.set_defaults(func=cmd_toy_corpus)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (ValidationError, ConfigError) as exc:
        log.error("%s", exc)
        return 1
    except (DisVAEError, OSError, ValueError) as exc:
        log.error("%s: %s", args.command, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
