"""Command line entry point: ``knetcov <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..errors import ContractError, NumericError
from . import scenario
from .config import SCENARIOS, load_config
from .covtest import covtest, parse_dims

log = logging.getLogger("knetcov")


def _common(p: argparse.ArgumentParser, checkpoint: bool = False) -> None:
    p.add_argument("--config", type=Path, help="YAML file with ExperimentConfig fields")
    p.add_argument("--scenario", choices=SCENARIOS,
                   help="scenario defaults to use when the config does not name one")
    p.add_argument("--seed", type=int, help="override the experiment seed")
    p.add_argument("--out", type=Path, help="output directory (default: config out_dir)")
    if checkpoint:
        p.add_argument("--checkpoint", type=Path, required=True, help="trained gain network")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="knetcov", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate train/validation/test datasets")
    _common(p)

    p = sub.add_parser("train", help="train the gain network")
    _common(p)
    p.add_argument("--data", type=Path, help="directory with train.csv and validation.csv")

    p = sub.add_parser("evaluate", help="evaluate KF/EKF and a trained network on the test set")
    _common(p, checkpoint=True)
    p.add_argument("--data", type=Path, help="directory with test.csv")

    p = sub.add_parser("single-traj", help="one test trajectory with 1-sigma bands")
    _common(p, checkpoint=True)
    p.add_argument("--index", type=int, default=0, help="test trajectory index")

    p = sub.add_parser("covtest", help="gain-to-covariance check on random systems")
    p.add_argument("--dims", default="random", help="'MxN', 'm=M,n=N' or 'random'")
    p.add_argument("--draws", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--T", type=int, default=30)
    p.add_argument("--rank-deficient", action="store_true", help="force a rank-deficient H")

    p = sub.add_parser("run", help="full scenario: generate, train, evaluate, report")
    _common(p)
    return parser


def _config(args):
    cfg = load_config(args.config, seed=args.seed, scenario=args.scenario)
    out = args.out if args.out is not None else Path(cfg.out_dir)
    return cfg, out


def _progress(epoch: int, train_db: float, val_db: float) -> None:
    log.info("epoch %4d  train %8.3f dB  val %8.3f dB", epoch, train_db, val_db)


def _print_summary(bundle: scenario.ReportBundle) -> None:
    for label, stats in bundle.summary["filters"].items():
        print(f"{label:>5}: empirical {stats['empirical_db']:8.3f} dB  "
              f"predicted {stats['predicted_db']:8.3f} dB  |gap| {stats['abs_gap_db']:.3f} dB")
    for name, ok in bundle.summary["claims"].items():
        print(f"  {'yes' if ok else 'no ':3} {name}")
    print(f"outputs in {bundle.out_dir}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "covtest":
            report = covtest(parse_dims(args.dims), args.draws, args.seed, args.T, args.rank_deficient)
            print("\n".join(report.lines()))
            return 0 if report.passed else 1
        cfg, out = _config(args)
        if args.command == "generate":
            for p in scenario.generate_command(cfg, out):
                print(p)
        elif args.command == "train":
            result = scenario.train_command(cfg, out, args.data, _progress)
            print(f"best epoch {result.best_epoch}: val {result.val_db[result.best_epoch - 1]:.3f} dB")
        elif args.command == "evaluate":
            _print_summary(scenario.evaluate_command(cfg, out, args.checkpoint, args.data))
        elif args.command == "single-traj":
            scenario.single_trajectory_report(cfg, args.checkpoint, args.index, out)
            print(out / "trajectory.csv")
        elif args.command == "run":
            _print_summary(scenario.run_scenario(cfg, out, _progress))
    except (ContractError, NumericError, scenario.ScenarioError, OSError) as exc:
        print(f"knetcov {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
