"""Command-line driver: one pipeline stage per invocation, stages talk through files."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import persist, pipeline
from .config import ConfigError, PipelineConfig, load_config
from .evalkit import EmptySplitError, UndefinedAUC
from .victim import TrainingDiverged

EXIT_OK = 0
EXIT_USAGE = 2  # argparse's own code
EXIT_CONFIG = 3
EXIT_MISSING_INPUT = 4
EXIT_CORRUPT = 5
EXIT_HASH_MISMATCH = 6
EXIT_DIVERGED = 7
EXIT_SELFTEST = 8
EXIT_EMPTY_SPLIT = 9
EXIT_INVALID = 10

SUBCOMMANDS = ("gen-data", "pretrain", "attack", "train-dede", "detect", "downstream", "report", "selftest")

log = logging.getLogger("dede")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dede", description="Backdoor-sample detection pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    helps = {
        "gen-data": "write the synthetic dataset splits",
        "pretrain": "contrastive pretraining of the clean encoder",
        "attack": "backdoor an encoder as configured in [attack]",
        "train-dede": "train and calibrate the detector on a victim encoder",
        "detect": "score the balanced test set; write scores, ROC, histogram and JSON report",
        "downstream": "linear probe CA/ASR, filtered by --dede if given",
        "report": "merge run directories into a summary table",
        "selftest": "run the gradient and AUC oracles",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=helps[name])
        if name == "selftest":
            p.add_argument("--quick", action="store_true", help="skip the transformer gradient check")
            continue
        p.add_argument("--config", type=Path, help="INI config file (defaults apply when omitted)")
        p.add_argument("--out", type=Path, help="run directory (default: [run] out)")
        p.add_argument("--seed", type=int, help="master seed, overrides [run] seed")
        if name in ("attack", "train-dede", "detect", "downstream"):
            p.add_argument("--encoder", type=Path, help="encoder checkpoint to use instead of the run default")
        if name in ("detect", "downstream"):
            p.add_argument("--dede", type=Path, help="detector checkpoint")
        if name not in ("gen-data", "report"):
            p.add_argument("--dataset", type=Path, help="dataset file replacing the stage's default input split")
        if name == "report":
            p.add_argument("runs", nargs="*", type=Path,
                           help="run directories (default: --out and its immediate subdirectories)")
    return parser


def resolve_config(args) -> tuple[PipelineConfig, Path]:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = cfg.with_overrides(run={"seed": args.seed})
    out = args.out or Path(cfg.get("run", "out"))
    if args.out is not None:
        cfg = cfg.with_overrides(run={"out": str(args.out)})
    return cfg, out


def _report_dirs(args, out: Path) -> list[Path]:
    if args.runs:
        return list(args.runs)
    if not out.is_dir():
        raise pipeline.MissingInput(f"run directory {out} does not exist")
    return [out] + sorted(p for p in out.iterdir() if p.is_dir())


def dispatch(args) -> int:
    if args.command == "selftest":
        from .selftest import run_selftest

        ok = run_selftest(quick=args.quick, echo=print)
        return EXIT_OK if ok else EXIT_SELFTEST
    cfg, out = resolve_config(args)
    out.mkdir(parents=True, exist_ok=True)
    cmd = args.command
    if cmd == "gen-data":
        data = pipeline.gen_data(cfg, out)
        print(f"wrote {len(data)} splits to {out / 'data'}")
    elif cmd == "pretrain":
        pipeline.pretrain(cfg, out, args.dataset)
        print(f"wrote {pipeline.RunPaths(out).clean_encoder}")
    elif cmd == "attack":
        res = pipeline.attack(cfg, out, args.encoder, args.dataset)
        print(f"{cfg.attack['kind']}: effectiveness {res.effectiveness:.4f} utility {res.utility:.4f}"
              f" success {res.success}")
    elif cmd == "train-dede":
        model = pipeline.train_detector(cfg, out, args.encoder, args.dataset)
        print(f"tau {model.tau:.6g} (mean training error {model.train_loss_mean:.6g}), alpha {model.alpha_train}")
    elif cmd == "detect":
        res = pipeline.detect(cfg, out, args.encoder, args.dede, args.dataset)
        r = res.report
        print(f"TPR {r.tpr:.1f}  FPR {r.fpr:.1f}  AUC {r.auc:.4f}  (k-means AUC {res.kmeans_auc:.4f})")
    elif cmd == "downstream":
        rep = pipeline.downstream(cfg, out, args.encoder, args.dede, args.dataset)
        print(f"CA {rep.ca:.1f}  ASR {rep.asr:.1f}  filtered train {rep.filtered_train} test {rep.filtered_test}")
    elif cmd == "report":
        print(pipeline.report(_report_dirs(args, out), out), end="")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    errors = (
        (ConfigError, EXIT_CONFIG, "config error"),
        (pipeline.MissingInput, EXIT_MISSING_INPUT, "missing input"),
        (FileNotFoundError, EXIT_MISSING_INPUT, "missing input"),
        (persist.HashMismatch, EXIT_HASH_MISMATCH, "hash mismatch"),
        (persist.FormatError, EXIT_CORRUPT, "corrupt file"),
        (TrainingDiverged, EXIT_DIVERGED, "training diverged"),
        ((EmptySplitError, UndefinedAUC), EXIT_EMPTY_SPLIT, "empty split"),
        (ValueError, EXIT_INVALID, "invalid input"),
    )
    try:
        return dispatch(args)
    except Exception as err:
        for exc_type, code, label in errors:
            if isinstance(err, exc_type):
                print(f"dede {args.command}: {label}: {err}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
