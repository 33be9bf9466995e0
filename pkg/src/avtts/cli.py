"""Command-line interface: ``avtts gen-corpus|prepare|train|synthesize|verify``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .audio import griffin_lim, write_wav
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .dataset import (AffectPoint, DataError, FeatureStats, gen_synthetic_corpus, load_prepared, prepare_corpus,
                      read_manifest, save_prepared, write_synthetic_corpus)
from .synthesis import Synthesizer, TeacherSignals, resolve_speaker, synthesize
from .text import DEFAULT_INVENTORY
from .training import resume, train_stage1, train_stage2

log = logging.getLogger("avtts")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run config (audio/model/train/paths sections)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config field; repeatable")


def _config(args) -> RunConfig:
    return load_config(args.config, args.overrides)


# -- commands --------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    if args.utts < 1:
        raise UsageError("--utts must be at least 1")
    if args.speakers < 1:
        raise UsageError("--speakers must be at least 1")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    corpus = gen_synthetic_corpus(args.utts, args.speakers, args.seed, affect=args.affect)
    manifest = write_synthetic_corpus(corpus, out)
    print(f"wrote {len(corpus)} utterances to {manifest}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    cfg = _config(args)
    if not Path(args.manifest).exists():
        raise DataError(f"manifest not found: {args.manifest}")
    manifest = read_manifest(args.manifest)
    if not manifest:
        raise DataError(f"{args.manifest} lists no utterances")
    corpus = prepare_corpus(manifest, cfg.audio)
    if not corpus.features:
        reasons = "; ".join(f"{u}: {r}" for u, r in corpus.discards[:3])
        raise DataError(f"all {len(manifest)} utterances were discarded ({reasons})")
    stats = FeatureStats.fit(corpus.features, scope=cfg.train.stats_scope)
    out = Path(args.out)
    save_prepared(corpus, stats, out)
    cfg.with_paths(data=out).write(out / "config.json")
    print(f"prepared {len(corpus.features)} utterances into {out}; {len(corpus.discards)} discarded "
          f"(see {out / 'discards.tsv'})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    data = args.data or cfg.paths.get("data")
    if not data:
        raise UsageError("--data is required")
    if args.stage == 2 and not (args.init or args.resume):
        raise UsageError("stage 2 needs --init with a stage-1 checkpoint")
    if not Path(data).exists():
        raise DataError(f"data path not found: {data}")
    corpus, stats = load_prepared(data)
    run_dir = Path(args.run_dir or cfg.paths.get("run_dir") or "run")
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg = cfg.with_paths(data=data, run_dir=run_dir, init=args.init)
    cfg.write(run_dir / f"config_stage{args.stage}.json")
    metrics = run_dir / f"metrics_stage{args.stage}.csv"

    def report(parts):
        if args.log_every and parts["step"] % args.log_every == 0:
            print(f"stage {args.stage} step {parts['step']}: total {parts['total']:.4f} mel {parts['L_mel']:.4f}",
                  flush=True)

    kwargs = dict(metrics_path=metrics, checkpoint_dir=run_dir, on_step=report)
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if ckpt.stage != f"stage{args.stage}":
            raise UsageError(f"--resume checkpoint is {ckpt.stage}, not stage{args.stage}")
        result = resume(corpus, ckpt, cfg.train, **kwargs)
    elif args.stage == 1:
        result = train_stage1(corpus, cfg.train, cfg.model, stats=stats, **kwargs)
    else:
        init = load_checkpoint(args.init)
        result = train_stage2(corpus, init, cfg.train, **kwargs)
        print(f"backbone freeze verified: {len(init.groups()['backbone'])} tensors unchanged")
    print(f"stage {args.stage} finished at step {result.checkpoint.step}; "
          f"checkpoint {run_dir / f'stage{args.stage}.ckpt'}, metrics {metrics}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    cfg = _config(args)
    ckpt = load_checkpoint(args.checkpoint)
    synth = Synthesizer(ckpt, cfg.audio, lexicon_path=cfg.paths.get("lexicon"))
    speaker = resolve_speaker(args.speaker_wav, args.speaker_embedding, cfg.audio)
    affect = None
    if args.arousal is not None or args.valence is not None:
        affect = AffectPoint(args.arousal if args.arousal is not None else 4.0,
                             args.valence if args.valence is not None else 4.0)
    teacher = TeacherSignals.load(args.teacher_force) if args.teacher_force else None
    if args.phonemes:
        ids = np.asarray(DEFAULT_INVENTORY.encode(args.phonemes.split()), dtype=np.int64)
        if synth.route == "e1" and affect is not None:
            log.warning("stage-1 checkpoint: arousal/valence inputs are ignored")
        result = synthesize(synth.model, ids, speaker, affect, synth.route, teacher)
        result.wav = griffin_lim(result.mel.astype(np.float64), cfg.audio, iters=args.gl_iters, seed=args.seed)
    else:
        result = synth(args.text, speaker, affect, teacher, griffin_lim_iters=args.gl_iters, seed=args.seed)
    out = Path(args.out)
    write_wav(out, result.wav, cfg.audio)
    if args.dump_mel:
        np.savez(args.dump_mel, mel=result.mel, durations=result.durations, pitch=result.pitch,
                 energy=result.energy, phoneme_ids=result.phoneme_ids)
    print(f"wrote {out}: {len(result.wav) / cfg.audio.sample_rate:.2f} s, {int(result.durations.sum())} frames")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verification import SUITES, run_suite
    if args.suite not in SUITES:
        raise UsageError(f"unknown suite {args.suite!r}; choose from {', '.join(SUITES)}")
    results = run_suite(args.suite)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="avtts", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="write a synthetic tone corpus with exact ground truth")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--utts", type=int, default=64)
    p.add_argument("--speakers", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--affect", action="store_true", help="attach random arousal/valence to every utterance")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("prepare", help="extract features and standardisation stats from a manifest")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="feature cache directory")
    _add_config_args(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="run training stage 1 or 2")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--data", type=Path, help="prepared feature cache")
    p.add_argument("--run-dir", type=Path)
    p.add_argument("--init", type=Path, help="stage-1 checkpoint (stage 2)")
    p.add_argument("--resume", type=Path, help="continue from a mid-run checkpoint of the same stage")
    p.add_argument("--log-every", type=int, default=100)
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="text to wav")
    p.add_argument("--checkpoint", required=True, type=Path)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--text")
    src.add_argument("--phonemes", help="space-separated phoneme symbols, bypassing the lexicon")
    spk = p.add_mutually_exclusive_group(required=True)
    spk.add_argument("--speaker-wav", type=Path)
    spk.add_argument("--speaker-embedding", type=Path, help=".npy file with a 256-d embedding")
    p.add_argument("--arousal", type=float, help="1-7 scale")
    p.add_argument("--valence", type=float, help="1-7 scale")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--dump-mel", type=Path, help="also save mel/durations/pitch/energy as .npz")
    p.add_argument("--teacher-force", type=Path, metavar="FILE.npz",
                   help="debug: use durations/pitch/energy from FILE.npz instead of predictions")
    p.add_argument("--gl-iters", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    _add_config_args(p)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("verify", help="run the acceptance checks")
    p.add_argument("--suite", default="all", help="gradients, dsp, invariants, training or all")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"avtts: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"avtts: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"avtts: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
