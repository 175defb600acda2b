"""Command-line entry point: ``trajvfi {synth,train,interpolate,eval,diag}``.

Exit codes: 0 success, 2 invalid arguments, 3 data errors, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .config import load_config
from .data import DIFFICULTY_SPEEDS, SyntheticTriplets, load_image, make_split, open_dataset, \
    save_image, save_triplet_dir, to_image, to_tensor
from .errors import InvalidArgument, InvalidData, NotFound, NumericFailure, PreconditionFailed
from .evaluation import evaluate, export_diagnostics
from .model import interpolate, load_checkpoint
from .motion import load_sidecar_flows
from .training import run_stage

EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
log = logging.getLogger("trajvfi")


def _frames(args):
    i0, i1 = to_tensor(load_image(args.frame0)), to_tensor(load_image(args.frame1))
    if i0.shape != i1.shape:
        raise InvalidData(f"frame sizes differ: {tuple(i0.shape[2:])} vs {tuple(i1.shape[2:])}")
    if not 0.0 <= args.t <= 1.0:
        raise InvalidArgument(f"t must lie in [0, 1], got {args.t}")
    flows = load_sidecar_flows(args.frame0) if args.sidecar else None
    return i0, i1, flows


def cmd_synth(args):
    train, val = make_split(args.count, args.seed, args.difficulty, args.val_fraction, (args.size, args.size))
    out = Path(args.out)
    for manifest in (train, val):
        if args.render:
            ds = SyntheticTriplets(manifest)
            for i in range(len(ds)):
                save_triplet_dir(ds[i], out / manifest.ids[i])
        manifest.save(out / f"{manifest.split}.txt")
    print(f"wrote {len(train.ids)} train / {len(val.ids)} val ids to {out}")


def cmd_train(args):
    model_cfg, sched = load_config(args.config)
    data = Path(args.data)
    train_set = open_dataset(data / "train.txt")
    val_set = open_dataset(data / "val.txt")
    outdir = Path(args.out or f"runs/stage{args.stage}")
    res = run_stage(args.stage, train_set, val_set, outdir, model_cfg, sched, resume=args.resume,
                    seed=args.seed, deterministic=args.deterministic, epochs=args.epochs)
    last = res.history[-1] if res.history else {}
    print(f"best checkpoint {res.checkpoint}; final val_psnr {last.get('val_psnr', float('nan')):.2f}")


def cmd_interpolate(args):
    model, _ = load_checkpoint(args.checkpoint)
    i0, i1, flows = _frames(args)
    out = interpolate(i0, i1, args.t, model, flows)
    if not torch.isfinite(out).all():
        raise NumericFailure("non-finite values in the interpolated frame")
    save_image(args.out, to_image(out))
    print(args.out)


def cmd_eval(args):
    model, _ = load_checkpoint(args.checkpoint)
    report = evaluate(model, args.manifest, args.report)
    print(json.dumps({"count": report.count, **report.aggregate}, indent=1))


def cmd_diag(args):
    model, _ = load_checkpoint(args.checkpoint)
    i0, i1, flows = _frames(args)
    for path in export_diagnostics(i0, i1, args.t, model, args.outdir, flows):
        print(path)


def build_parser():
    parser = argparse.ArgumentParser(prog="trajvfi", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic triplet dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--difficulty", choices=sorted(DIFFICULTY_SPEEDS), default="medium")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--no-render", dest="render", action="store_false",
                   help="write manifests only; samples are rendered on demand")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--data", required=True, help="directory holding train.txt and val.txt")
    p.add_argument("--config")
    p.add_argument("--resume")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("interpolate", cmd_interpolate, "synthesise one intermediate frame"),
                                 ("diag", cmd_diag, "write diagnostic images")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--frame0", required=True)
        p.add_argument("--frame1", required=True)
        p.add_argument("--t", type=float, default=0.5)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--sidecar", action="store_true", help="read .fwd.flo/.bwd.flo next to frame 0")
        if name == "interpolate":
            p.add_argument("--out", required=True)
        else:
            p.add_argument("--outdir", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True, help="CSV path; a JSON summary is written alongside")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (InvalidArgument, PreconditionFailed) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (NotFound, InvalidData) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
