"""Command-line entry point: prepare, train, convert, evaluate, selftest, toy."""
import argparse
import logging
import os
import sys
from pathlib import Path

import torch

from .errors import (
    BlowError, ConfigError, CorpusError, DimensionError, FormatError, SpeakerLookupError, SplitError,
)

log = logging.getLogger("blow")

RUN_DIR_ENV = "BLOW_RUN_DIR"
USER_ERRORS = (ConfigError, CorpusError, SplitError, FormatError, SpeakerLookupError, DimensionError,
               FileNotFoundError, NotADirectoryError)


def _run_dir(arg):
    """--outdir wins; otherwise $BLOW_RUN_DIR; otherwise ./runs/default."""
    return Path(arg or os.environ.get(RUN_DIR_ENV) or "runs/default")


def cmd_prepare(args):
    from .corpus import build_corpus, split_corpus, write_manifest

    corpus = split_corpus(build_corpus(args.data, strict=not args.any_rate), args.val_frac, args.test_frac,
                          seed=args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_manifest(corpus, args.out)
    for name in ("train", "valid", "test"):
        print(f"{name}: {len(corpus.split(name))} utterances")
    for line in corpus.report:
        print(line)
    return 0


def _load_run_config(args):
    from .config import RunConfig, load_config

    cfg = load_config(args.config) if args.config else RunConfig()
    return cfg.with_overrides(args.set or [])


def cmd_train(args):
    from dataclasses import replace

    from .corpus import index_frames, read_manifest
    from .flow import Blow
    from .trainer import train

    cfg = _load_run_config(args)
    corpus = read_manifest(args.manifest)
    flow_cfg = replace(cfg.flow, n_speakers=corpus.n_speakers)
    outdir = _run_dir(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.json").write_text(cfg.dumps())
    torch.manual_seed(cfg.seed)
    tr = index_frames(corpus, "train", flow_cfg.frame_size)
    va = index_frames(corpus, "valid", flow_cfg.frame_size)
    model = Blow(flow_cfg, seed=cfg.seed)
    history = train(model, tr, va, cfg.train, cfg.augment, outdir=outdir, speakers=corpus.speakers,
                    resume=args.resume)
    if history:
        best = min(history, key=lambda r: r["val_nll"])
        print(f"trained {history[-1]['epoch']} epochs; best validation L = {-best['val_nll']:.4f} nat/dim "
              f"(epoch {best['epoch']})")
    return 0


def _read_jobs(path):
    import csv

    from .conversion import ConversionJob

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = {"input", "src", "tgt", "output"} - set(rows[0] if rows else {})
    if missing:
        raise FormatError(f"{path}: job file needs columns input,src,tgt,output (missing {sorted(missing)})",
                          field="header")
    return [ConversionJob(r["input"], r["src"], r["tgt"], r["output"]) for r in rows]


def cmd_convert(args):
    from .checkpoint import load_checkpoint
    from .conversion import ConversionJob, batch_convert, random_targets, speaker_index

    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.model.eval()
    if args.jobs:
        jobs = _read_jobs(args.jobs)
        if args.random_targets:
            jobs = random_targets(jobs, ckpt.speakers, seed=args.seed)
        report = batch_convert(model, ckpt.speakers, jobs, manifest=args.manifest)
        print(f"{report.n_ok}/{len(jobs)} conversions written")
        for path, err in report.errors:
            print(f"error: {path}: {err}", file=sys.stderr)
        return 0 if not report.errors else 1
    if not (args.input and args.src and args.tgt and args.out):
        raise ConfigError("single conversion needs --in, --src, --tgt and --out (or use --jobs)")
    for name in (args.src, args.tgt):
        speaker_index(ckpt.speakers, name)
    report = batch_convert(model, ckpt.speakers, [ConversionJob(args.input, args.src, args.tgt, args.out)],
                           manifest=args.manifest)
    if report.errors:
        raise report_error(report.errors[0])
    print(f"wrote {args.out}")
    return 0


def report_error(entry):
    path, msg = entry
    if not Path(path).is_file():
        return FileNotFoundError(f"{path}: {msg}")
    return BlowError(f"{path}: {msg}")


def cmd_evaluate(args):
    from .checkpoint import load_checkpoint
    from .conversion import read_conversion_manifest
    from .corpus import index_frames, read_manifest
    from .evaluation import latent_probe, spoofing_rate, train_spoof_classifier, write_metrics
    from .trainer import evaluate_nll

    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.model.eval()
    corpus = read_manifest(args.manifest)
    if list(corpus.speakers) != list(ckpt.speakers):
        raise ConfigError(f"manifest speakers {corpus.speakers} differ from checkpoint speakers {ckpt.speakers}")
    F = model.cfg.frame_size
    test = index_frames(corpus, args.split, F)
    metrics = {"L": evaluate_nll(model, test)}
    if args.conversions:
        clf = train_spoof_classifier(corpus, seed=args.seed)
        res = spoofing_rate(clf, read_conversion_manifest(args.conversions), ckpt.speakers)
        metrics["spoofing"] = res.rate
        metrics["spoofing_scored"] = res.n_scored
        if res.missing:
            print(f"{len(res.missing)} conversion outputs missing", file=sys.stderr)
    if args.probe:
        res = latent_probe(model, index_frames(corpus, "train", F), test, max_frames=args.probe_frames,
                           seed=args.seed)
        metrics["probe_accuracy"] = res.accuracy
        metrics["probe_chance"] = res.chance
    out = Path(args.out) if args.out else _run_dir(None) / "metrics.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics(out, metrics)
    for k, v in metrics.items():
        print(f"{k},{v:.6f}" if isinstance(v, float) else f"{k},{v}")
    return 0


def cmd_selftest(args):
    from .selftest import run_selftest

    dtype = torch.float32 if args.float32 else torch.float64
    results = run_selftest(dtype=dtype, eps=args.eps, seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print("selftest " + ("passed" if not failed else "FAILED: " + ", ".join(failed)))
    return 1 if failed else 0


def cmd_toy(args):
    from .toy import make_toy_corpus

    paths = make_toy_corpus(args.out, n_speakers=args.speakers, minutes_per_speaker=args.minutes,
                            utterance_seconds=args.seconds, seed=args.seed)
    print(f"wrote {len(paths)} utterances under {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="blow", description="Flow-based non-parallel voice conversion.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="scan a corpus tree and write a sentence-disjoint split manifest")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--val-frac", type=float, default=0.1)
    s.add_argument("--test-frac", type=float, default=0.1)
    s.add_argument("--any-rate", action="store_true", help="accept sample rates other than 16 kHz")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train a model from a split manifest")
    s.add_argument("--config")
    s.add_argument("--manifest", required=True)
    s.add_argument("--outdir", help=f"run directory (default ${RUN_DIR_ENV} or runs/default)")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("convert", help="convert one file or a job list")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input")
    s.add_argument("--src")
    s.add_argument("--tgt")
    s.add_argument("--out")
    s.add_argument("--jobs", help="CSV with input,src,tgt,output columns")
    s.add_argument("--manifest", help="where to write the conversion manifest CSV")
    s.add_argument("--random-targets", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("evaluate", help="likelihood, spoofing and latent-probe metrics")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--conversions")
    s.add_argument("--probe", action="store_true")
    s.add_argument("--probe-frames", type=int, default=2000)
    s.add_argument("--split", default="test")
    s.add_argument("--out")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("selftest", help="numerical self checks")
    s.add_argument("--float32", action="store_true")
    s.add_argument("--eps", type=float, default=1e-6)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_selftest)

    s = sub.add_parser("toy", help="write a synthetic multi-speaker corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--speakers", type=int, default=2)
    s.add_argument("--minutes", type=float, default=10.0)
    s.add_argument("--seconds", type=float, default=3.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_toy)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("internal failure", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
