"""Command-line entry: prepare | train | evaluate | ablate | report | verify.

Exit codes: 0 success, 2 config error, 3 data error, 4 training abort,
5 verification failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .data import DataError
from .experiment import (
    VerificationError,
    apply_profile,
    cmd_ablate,
    cmd_evaluate,
    cmd_prepare,
    cmd_report,
    cmd_train,
    cmd_verify,
    load_config,
)
from .training import CheckpointError, ConfigError, TrainingAbort

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4
EXIT_VERIFY = 5


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sasrecllm",
        description="Hybrid sequential-recommender experiments at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="INI config path")
        p.add_argument("--run-dir", required=True, help="run directory")
        p.add_argument("--seed", type=int, default=None, help="override the seed list")
        p.add_argument("--resume", action="store_true",
                       help="skip stages whose best checkpoint already exists")
        p.add_argument("--desk-scale", action="store_true",
                       help="force the desk-scale model profile")

    common(sub.add_parser("prepare", help="build and serialize the split bundle"))
    common(sub.add_parser("train", help="train the configured model"))
    p_eval = sub.add_parser("evaluate", help="evaluate checkpoints on test/warm/cold")
    common(p_eval)
    p_eval.add_argument("--baseline", default=None,
                        help="reference report.csv for relative improvement")

    p_abl = sub.add_parser("ablate", help="three-way component comparison")
    p_abl.add_argument("--sasrec-dir", required=True)
    p_abl.add_argument("--tallrec-dir", required=True)
    p_abl.add_argument("--sasrecllm-dir", required=True)
    p_abl.add_argument("--icl-dir", required=True)
    p_abl.add_argument("--out", required=True, help="output CSV path")

    p_rep = sub.add_parser("report", help="emit plot-ready CSVs for a run")
    p_rep.add_argument("--run-dir", required=True)
    p_rep.add_argument("--out", default=None)

    p_ver = sub.add_parser("verify", help="recompute reported metrics from logs")
    p_ver.add_argument("--run-dir", required=True)
    return parser


def _config_from_args(args) -> "ExperimentConfig":
    overrides = {}
    if args.seed is not None:
        overrides["seeds"] = (args.seed,)
    config = load_config(args.config, overrides)
    if args.desk_scale:
        config = apply_profile(config, "desk")
    return config


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "prepare":
            stats = cmd_prepare(_config_from_args(args), args.run_dir)
            for key, value in stats.items():
                print(f"{key}={value}")
        elif args.command == "train":
            config = _config_from_args(args)
            summary = cmd_train(config, args.run_dir, resume=args.resume)
            for seed, info in summary.items():
                print(f"seed {seed}: {info['seconds']:.1f}s, "
                      f"{'; '.join(info['stages'])}")
        elif args.command == "evaluate":
            config = _config_from_args(args)
            if args.baseline:
                from dataclasses import replace

                config = replace(config, baseline_report=args.baseline)
            rows = cmd_evaluate(config, args.run_dir)
            for row in rows:
                if row["seed"] == "mean":
                    print(f"{row['model']} {row['split']}: auc={row['auc']} "
                          f"uauc={row['uauc']} logloss={row['logloss']}")
        elif args.command == "ablate":
            rows = cmd_ablate(
                {"sasrec": args.sasrec_dir, "tallrec_variant": args.tallrec_dir,
                 "sasrecllm": args.sasrecllm_dir, "icl_variant": args.icl_dir},
                args.out,
            )
            for row in rows:
                print(f"{row['model']}: auc={row['auc']} uauc={row['uauc']} "
                      f"rel_imp={row['rel_imp_vs_benchmark'] or '--'}")
        elif args.command == "report":
            emitted = cmd_report(args.run_dir, args.out)
            for name, path in emitted.items():
                print(f"{name}: {path}")
        elif args.command == "verify":
            checked = cmd_verify(args.run_dir)
            print(f"verified {checked} reported values")
    except (ConfigError, CheckpointError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingAbort as e:
        print(f"training abort: {e}", file=sys.stderr)
        return EXIT_TRAINING
    except VerificationError as e:
        print(f"verification failure: {e}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
