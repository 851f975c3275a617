"""Command-line interface.

Subcommands mirror the pipeline stages plus `run-all`, which stitches them
together with resume-from-missing-artifact semantics and writes the run
manifest. Any config field can be overridden with --set section.key=value;
CLI flags win over the config file.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, PROFILES, load_config, parse_override
from .data import CorpusError


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="JSON config file")
    p.add_argument("--profile", choices=PROFILES, default="desk",
                   help="config defaults profile")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out-dir", type=Path, default=None, help="override config out_dir")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override any config field")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="minute",
        description="Two-stage video corpus moment retrieval: train, index, "
                    "localize, rank, and evaluate on desk-scale corpora.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in [
        ("gen-data", "generate the synthetic corpus"),
        ("train-retriever", "train the video retriever"),
        ("build-index", "encode all videos and dump retrieval rank lists"),
        ("train-localizer", "train the moment localizer with hard negatives"),
        ("infer", "rank moments for the test queries under both scoring modes"),
        ("run-all", "run every stage end to end and write the run manifest"),
        ("bias-report", "profile where top-1 predictions come from"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "run-all":
            p.add_argument("--no-resume", action="store_true",
                           help="rerun every stage even if artifacts exist")

    p = sub.add_parser("eval", help="compute recall metrics")
    _add_common(p)
    p.add_argument("--predictions", type=Path, default=None,
                   help="prediction JSONL (standalone mode)")
    p.add_argument("--gt", type=Path, default=None,
                   help="query JSONL with ground-truth moments (standalone mode)")
    p.add_argument("--task", choices=["vcmr", "svmr"], default="vcmr")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--iou", type=float, default=0.7)
    return parser


def _resolve_config(args) -> tuple[dict, Path]:
    overrides: dict = {}
    for expr in args.overrides:
        from .config import _deep_merge

        overrides = _deep_merge(overrides, parse_override(expr))
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = str(args.out_dir)
    cfg = load_config(args.config, profile=args.profile, overrides=overrides)
    return cfg, Path(cfg["out_dir"])


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "eval" and args.predictions is not None:
            from .driver import load_ground_truth, read_predictions
            from .evaluation import recall_at_k_iou

            if args.gt is None:
                print("eval: --gt is required with --predictions", file=sys.stderr)
                return 2
            value = recall_at_k_iou(read_predictions(args.predictions),
                                    load_ground_truth(args.gt),
                                    task=args.task, k=args.k, iou_threshold=args.iou)
            print(f"{args.task} R@{args.k} IoU={args.iou}: {value:.4f}")
            return 0

        cfg, out_dir = _resolve_config(args)
        out_dir.mkdir(parents=True, exist_ok=True)
        from . import driver

        if args.command == "run-all":
            manifest = driver.run_all(cfg, out_dir, resume=not args.no_resume)
            print(json.dumps(manifest["metrics"]["eval"], sort_keys=True, indent=1))
            print(f"run manifest: {out_dir / 'run_manifest.json'}")
            return 0
        if args.command == "eval":
            driver.run_stage("eval", cfg, out_dir)
            with open(out_dir / "eval_report.json") as f:
                print(f.read())
            return 0
        driver.run_stage(args.command, cfg, out_dir)
        print(f"{args.command}: done (outputs under {out_dir})")
        return 0
    except (ConfigError, CorpusError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (RuntimeError, ValueError, FloatingPointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
