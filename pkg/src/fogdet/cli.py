"""Command-line entry point: generate / train / eval / verify.

Exit codes: 0 success, 1 invariant failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import sys

from . import harness
from .config import RunConfig
from .detector import ConfigError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fogdet",
        description="Synthetic fog detection experiments: data generation, "
                    "variant training, mAP@50 evaluation, invariant checks.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (("generate", "write paired clear/foggy datasets"),
                      ("train", "train a detector variant"),
                      ("eval", "evaluate a checkpoint across fog splits"),
                      ("verify", "run all invariant suites")):
        cmd = sub.add_parser(name, help=doc)
        cmd.add_argument("--config", help="JSON run configuration")
        cmd.add_argument("--seed", type=int, help="override the config seed")
        cmd.add_argument("--out", default="out", help="artifact directory")
        if name == "eval":
            cmd.add_argument("--checkpoint", help="checkpoint directory")
    return parser


def load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        if args.command == "generate":
            manifest = harness.generate(cfg)
            print(f"wrote {len(manifest['splits'])} splits under {cfg.data_root}")
        elif args.command == "train":
            report = harness.train(cfg, args.out)
            run = report["run"]
            print(f"{run['variant']}: status={run['status']} "
                  f"steps={run['steps_run']} final_loss={run['final_loss']}")
        elif args.command == "eval":
            report = harness.evaluate(cfg, args.out, args.checkpoint)
            for row in report["splits"]:
                print(f"{row['split']}: mAP@50 = {row['map50']:.3f}")
        elif args.command == "verify":
            ok, results = harness.verify(args.out)
            for name, passed, detail in results:
                line = f"{'PASS' if passed else 'FAIL'} {name}"
                print(line + (f": {detail}" if detail else ""))
            return 0 if ok else 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
