#!/usr/bin/env python3
"""
Command-line surface of the video instance segmentation pipeline.

Usage: python -m app.vision.harness.cli <gen-data|train|infer|eval|viz|ablate> ...
Exit codes: 0 success, 1 invalid input (validation / format errors), 2 runtime failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from app.utils.config import VisConfig, setup_logging
from app.vision.harness.harness import (
    evaluate_results, infer_dataset, load_checkpoint, run_ablation, save_checkpoint, train, visualize,
)
from app.vision.metrics.metrics import read_results, write_results
from app.vision.synthdata.synthdata import CorpusSpec, generate_corpus, read_dataset, write_dataset

logger = logging.getLogger(__name__)


def _load_config(args: argparse.Namespace) -> VisConfig:
    config = VisConfig.from_toml(args.config) if args.config else VisConfig()
    if getattr(args, "data", None):
        config = config.override({"data.root": str(args.data)})
    return config


def cmd_gen_data(args: argparse.Namespace) -> None:
    spec = CorpusSpec.model_validate(json.loads(Path(args.spec).read_text()))
    corpus = generate_corpus(spec, spec.num_clips)
    write_dataset([clip for clip, _ in corpus], [gt for _, gt in corpus], args.out)
    print(f"✅ Wrote {len(corpus)} clips to {args.out}")


def cmd_train(args: argparse.Namespace) -> None:
    config = _load_config(args)
    out = Path(args.out)
    checkpoint = train(config, loss_curve_path=out.with_name(out.name + ".loss.csv"), progress=not args.quiet)
    save_checkpoint(checkpoint, out)
    final = checkpoint.loss_curve["total"].iloc[-1]
    print(f"✅ Trained {checkpoint.iteration} iterations, final loss {final:.4f}, checkpoint {out}")


def cmd_infer(args: argparse.Namespace) -> None:
    checkpoint = load_checkpoint(args.ckpt)
    tracks = infer_dataset(checkpoint, read_dataset(args.data))
    write_results(tracks, args.out)
    print(f"✅ Wrote {len(tracks)} tracks to {args.out}")


def cmd_eval(args: argparse.Namespace) -> None:
    report = evaluate_results(args.results, read_dataset(args.data), args.protocol, report_path=args.out)
    if args.protocol == "vis":
        print(f"📊 AP {report.AP:.4f} | AP50 {report.AP50:.4f} | AP75 {report.AP75:.4f} | "
              f"AR1 {report.AR1:.4f} | AR10 {report.AR10:.4f} | ID switches {report.id_switches}")
    else:
        print(f"📊 J {report.J_mean:.4f} | F {report.F_mean:.4f} | J&F {report.JF_mean:.4f} | "
              f"ID switches {report.id_switches}")


def cmd_viz(args: argparse.Namespace) -> None:
    dataset = read_dataset(args.data)
    tracks = read_results(args.results)
    out = Path(args.out)
    for clip_id in dataset.clip_ids:
        clip, _ = dataset.load(clip_id)
        visualize(clip, tracks, out / clip_id, dataset.categories)
    print(f"✅ Rendered {len(dataset)} clips to {out}")


def cmd_ablate(args: argparse.Namespace) -> None:
    config = _load_config(args)
    reports = run_ablation(config, read_dataset(args.data), args.out, args.protocol, progress=not args.quiet)
    for variant, report in reports.items():
        headline = report.AP if args.protocol == "vis" else report.JF_mean
        print(f"📊 {variant:<13} {'AP' if args.protocol == 'vis' else 'J&F'} {headline:.4f} "
              f"ID switches {report.id_switches}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="visgraph", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--log-level", default=None, help="overrides VISGRAPH_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic corpus")
    p.add_argument("--spec", required=True, help="JSON file with clip spec fields plus num_clips")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and save a checkpoint")
    p.add_argument("--config", default=None, help="TOML config; defaults apply when omitted")
    p.add_argument("--data", default=None, help="dataset root, overrides data.root")
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="track every clip of a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a results file")
    p.add_argument("--results", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", choices=("vis", "uvos"), default="vis")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="render track overlays")
    p.add_argument("--results", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("ablate", help="train and evaluate the resfuser / gnn variants")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--protocol", choices=("vis", "uvos"), default="vis")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        args.func(args)
    except ValueError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.exception("%s failed", args.command)
        print(f"❌ {args.command} failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
