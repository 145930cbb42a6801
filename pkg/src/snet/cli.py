"""Command-line entry point: gen-data, train, eval, diagnose."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import data as D
from . import info
from .errors import SNetError
from .train import RunConfig, diagnose, evaluate, load_grouping, load_model, train


def _gen_data(args):
    spec = D.SynthSpec.from_text(Path(args.spec).read_text()) if args.spec else D.SynthSpec()
    if args.seed is not None:
        spec = D.SynthSpec(**{**spec.__dict__, "seed": args.seed})
    samples = D.generate(spec, args.count)
    D.write_dataset(args.out, samples, spec.num_classes, args.val_fraction,
                    {"spec.txt": spec.to_text(), "grouping.txt": spec.grouping_text()})
    print(f"wrote {args.count} samples to {args.out}")


def _train(args):
    path = Path(args.config)
    run = RunConfig.from_text(path.read_text(), base_dir=path.parent)
    if args.epochs:
        run = RunConfig(**{**run.__dict__, "epochs": args.epochs})
    result = train(run, args.out, resume=args.resume, verbose=not args.quiet)
    print(f"best eval dice {result.best_eval:.4f}; checkpoints in {result.out_dir}")


def _eval(args):
    model = load_model(args.checkpoint)
    ds = D.load_dataset(args.data, args.split)
    grouping = load_grouping(args.grouping, model.config.num_classes)
    report = evaluate(model, ds, grouping, args.hd_percentile)
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def _diagnose(args):
    ds = D.load_dataset(args.data, args.split)
    report = diagnose(args.checkpoint, ds, info.Binning(args.bins), args.max_samples, args.out,
                      args.pooling)
    report.check()
    sys.stdout.write(report.to_csv())
    print("selected pairs: " + ", ".join(f"(cnn{p.cnn_stage}, vit{p.vit_stage})"
                                         for p in report.selected))


def build_parser():
    p = argparse.ArgumentParser(prog="snet", description="Stagger network toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    g.add_argument("--spec", help="synthetic spec (key=value); defaults built in")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--val-fraction", type=float, default=0.2)
    g.set_defaults(func=_gen_data)

    t = sub.add_parser("train", help="train from a key=value config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--epochs", type=int, help="override the configured epoch count")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=_train)

    e = sub.add_parser("eval", help="per-class dice / HD / IoU")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--grouping")
    e.add_argument("--split")
    e.add_argument("--hd-percentile", type=int, choices=(95, 100), default=95)
    e.add_argument("--out", help="also write the CSV here")
    e.set_defaults(func=_eval)

    d = sub.add_parser("diagnose", help="entropy / MI / KL diagnostics of encoder features")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--split")
    d.add_argument("--bins", type=int, default=64)
    d.add_argument("--max-samples", type=int, default=8)
    d.add_argument("--pooling", choices=("all", "channel"), default="all")
    d.add_argument("--out", required=True)
    d.set_defaults(func=_diagnose)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except SNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
