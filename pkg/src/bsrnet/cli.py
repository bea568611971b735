"""``bsr`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import ARMS, ConfigError, load_config
from .synthdata import DatasetFormatError

logger = logging.getLogger("bsrnet")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bsr", description="Balanced subclass regularization for semi-supervised segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value config file (all keys optional)")
        return p

    add("gen-data", "generate and save the synthetic dataset")
    add("phase1", "train the Phase-I backbone on labeled data")
    add("cluster", "generate balanced (and plain) subclass labels")
    p = add("phase2", "mean-teacher training for one ablation arm")
    p.add_argument("--arm", choices=ARMS, help="overrides ablation_arm from the config")
    p = add("eval", "evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--student", action="store_true", help="evaluate student instead of teacher weights")
    p.add_argument("--out", help="output directory (default: next to the checkpoint)")
    add("ablate", "run arms A-E over all ablation seeds")
    return parser


def _run(args) -> None:
    cfg = load_config(args.config)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    if args.command == "gen-data":
        split = pipeline.generate_data(cfg)
        print(f"wrote {len(split.labeled)}/{len(split.unlabeled)}/{len(split.test)} samples to {cfg.data_path}")
    elif args.command == "phase1":
        _, log = pipeline.phase1_train(cfg)
        print(f"phase 1: {len(log.rows)} iterations, final seg loss {log.rows[-1]['sup']:.4f}"
              if log.rows else "phase 1: 0 iterations")
    elif args.command == "cluster":
        res = pipeline.phase1_cluster(cfg)
        for name, r in res.items():
            ratio = pipeline.foreground_balance_ratio(r.sub_labels, r.smap)
            print(f"{name}: K_sub={r.smap.k_sub} counts={r.smap.counts} max/min subclass pixels={ratio:.3f}")
    elif args.command == "phase2":
        arm = args.arm or cfg.ablation_arm
        split = pipeline.load_data(cfg)
        rep, _ = pipeline.run_arm(cfg, arm, split, None, None)
        print(f"arm {arm}: mean dice {rep.mean_dice:.4f}")
    elif args.command == "eval":
        rep = pipeline.evaluate_cmd(cfg, args.checkpoint, args.student,
                                    Path(args.out) if args.out else None)
        print(rep.to_csv(), end="")
    elif args.command == "ablate":
        summary = pipeline.ablate(cfg)
        print((out / "ablation.csv").read_text(), end="")
        if summary["failures"]:
            raise RuntimeError(f"{len(summary['failures'])} arm runs failed")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"bsr: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        _run(args)
    except ConfigError as exc:
        print(f"bsr: config error: {exc}", file=sys.stderr)
        return 1
    except (pipeline.MissingArtifact, DatasetFormatError, pipeline.TrainingDiverged, ValueError,
            RuntimeError, OSError) as exc:
        print(f"bsr: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
