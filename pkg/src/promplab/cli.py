"""Command line: ``promplab {train,verify,variance}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, load, preset
from .lab import run_train, run_variance, run_verify
from .meta_opt import TrainingDiverged


def _config(args):
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.config:
        return load(args.config)
    default = {"train": "desk", "verify": "verify", "variance": "variance"}[args.command]
    return preset(args.preset or default)


def _add_common(p):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--preset", help="named preset (desk, paper-scale, point1d, point2d, verify, variance)")
    p.add_argument("--seed", type=int, help="override the configured seed(s)")
    p.add_argument("--out", help="output directory or file")
    p.add_argument("--force", action="store_true", help="overwrite existing output")


def build_parser():
    parser = argparse.ArgumentParser(prog="promplab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("train", help="run meta-training and write curve files"))
    _add_common(sub.add_parser("verify", help="run the exact-enumeration checks"))
    p = sub.add_parser("variance", help="compare meta-gradient estimator variance")
    _add_common(p)
    p.add_argument("-K", type=int, help="number of independent estimates")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _config(args)
        seed = 0 if args.seed is None else args.seed

        if args.command == "verify":
            report = run_verify(config, seed)
            for line in report.lines():
                print(line)
            print("PASS" if report.passed else "FAIL")
            return 0 if report.passed else 1

        if args.command == "variance":
            reports = run_variance(config, args.K, seed)
            for r in reports:
                print(f"{r.tag:<8} K={r.samples.shape[0]} aggregate relative std={r.aggregate_relative_std:.4g}"
                      f"  norm-level={r.norm_relative_std:.4g}")
            if len(reports) >= 2 and reports[1].aggregate_relative_std > 0:
                print(f"ratio {reports[0].tag}/{reports[1].tag} = "
                      f"{reports[0].aggregate_relative_std / reports[1].aggregate_relative_std:.4g}")
            if args.out:
                out = Path(args.out)
                if out.exists() and not args.force:
                    raise FileExistsError(f"{out} exists; pass --force to overwrite")
                out.write_text(json.dumps([r.summary() for r in reports], indent=2))
            return 0

        seeds = None if args.seed is None else [args.seed]
        manifest = run_train(config, args.out, seeds, args.force, log=print)
        print(f"wrote {len(manifest['files'])} curve file(s) to {args.out or config.run.output_dir}")
        return 0
    except (ConfigError, FileExistsError, TrainingDiverged, OSError) as exc:
        print(f"promplab: error: {exc}", file=sys.stderr)
        return 2
