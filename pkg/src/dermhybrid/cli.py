"""``derm-hybrid`` command-line interface."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from dermhybrid import pipeline
from dermhybrid.config import load_config
from dermhybrid.features import registry_csv

log = logging.getLogger("dermhybrid")

STAGES = {
    "split": pipeline.run_split,
    "prep": pipeline.run_prep,
    "features": pipeline.run_features,
    "train": pipeline.run_train,
}


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        # --seed re-derives every seed from the new master seed
        cfg = replace(cfg, seed=args.seed, split_seed=None, aug_seed=None, model_a_seed=None,
                      model_b_seed=None, train_seed=None, svm_seed=None)
    if getattr(args, "no_injection", False):
        cfg = replace(cfg, use_injection=False)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="derm-hybrid", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--no-injection", action="store_true", help="image-only baseline (no handcrafted features)")
        return p

    for name in ("split", "prep", "features", "train"):
        common(sub.add_parser(name, help=f"run the {name} stage"))
    common(sub.add_parser("pipeline", help="split, prep, features and train in sequence"))
    ev = common(sub.add_parser("eval", help="score a split with the trained models"))
    ev.add_argument("--split", choices=("val", "test"), default="test")
    pr = common(sub.add_parser("predict", help="classify one image"))
    pr.add_argument("image", type=Path)
    group = pr.add_mutually_exclusive_group(required=True)
    group.add_argument("--mask", type=Path)
    group.add_argument("--probmaps", type=Path, nargs="+")

    syn = sub.add_parser("synth", help="write the synthetic demonstration dataset")
    syn.add_argument("out", type=Path)
    syn.add_argument("--per-class", type=int, default=100)
    syn.add_argument("--size", type=int, default=64)
    syn.add_argument("--seed", type=int, default=0)

    reg = sub.add_parser("registry", help="print the feature registry CSV")
    reg.add_argument("--out", type=Path, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = args.command
    try:
        if args.command == "synth":
            from dermhybrid.synthetic import make_synthetic_dataset

            labels = make_synthetic_dataset(args.out, args.per_class, args.size, args.seed)
            print(labels)
            return 0
        if args.command == "registry":
            text = registry_csv()
            if args.out:
                args.out.write_text(text, encoding="utf-8")
            else:
                sys.stdout.write(text)
            return 0

        stage = "config"
        cfg = _config(args)
        if args.command in STAGES:
            stage = args.command
            STAGES[args.command](cfg)
        elif args.command == "pipeline":
            for stage, fn in STAGES.items():
                fn(cfg)
        elif args.command == "eval":
            stage = "eval"
            reports = pipeline.run_eval(cfg, args.split)
            for tag, rep in reports.items():
                print(tag + " " + " ".join(f"{k}={v:.4f}" for k, v in rep.as_rows()))
        elif args.command == "predict":
            stage = "predict"
            label, scores = pipeline.predict_image(cfg, args.image, args.mask, tuple(args.probmaps or ()))
            print(label + "," + ",".join(f"{s:.6f}" for s in scores))
    except pipeline.StageError as exc:
        print(f"derm-hybrid: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"derm-hybrid: stage '{stage}' failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
