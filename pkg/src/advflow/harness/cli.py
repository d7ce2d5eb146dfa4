"""Command-line entry point: ``advflow {pretrain,finetune,verify,compare,eval}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import AdvFlowError
from .config import RunConfig
from .runs import PRETRAIN_CKPT, compare, evaluate_checkpoint, finetune, pretrain
from .verify import FAULTS, run_verify

log = logging.getLogger("advflow")


def _print(obj):
    print(json.dumps(obj, indent=2))


def cmd_pretrain(args):
    cfg = RunConfig.load(args.config)
    _, summary = pretrain(cfg)
    _print(summary)
    return 0


def cmd_finetune(args):
    cfg = RunConfig.load(args.config)
    result = finetune(cfg, args.algo, args.checkpoint)
    last = result.metrics[-1] if result.metrics else {}
    _print({"algo": args.algo, "iterations": len(result.metrics),
            "final_eval_reward": last.get("eval_reward"),
            "final_mean_reward": last.get("mean_reward")})
    return 0


def cmd_verify(args):
    report = run_verify(args.seed, args.inject_fault)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    for c in report["checks"]:
        if not c["pass"]:
            log.error("FAILED %s: value %.3g > bound %.3g", c["check_name"], c["value"], c["bound"])
    return 0 if report["passed"] else 1


def cmd_compare(args):
    summary, _, _ = compare(args.a, args.b, args.threshold, args.out)
    _print(summary)
    return 0


def cmd_eval(args):
    cfg = RunConfig.load(args.config)
    ckpt = args.checkpoint or cfg.output_dir / PRETRAIN_CKPT
    _print(evaluate_checkpoint(ckpt, cfg, args.n_samples, args.steps))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="advflow", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="flow-matching pretraining on the task data")
    s.add_argument("config")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="reward fine-tuning from a pretrained checkpoint")
    s.add_argument("config")
    s.add_argument("--algo", choices=("advflow", "grpo"), default="advflow")
    s.add_argument("--checkpoint", help="defaults to <output_dir>/pretrain.aflw")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("verify", help="run every property suite; nonzero exit on failure")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="also write the JSON report here")
    s.add_argument("--inject-fault", choices=FAULTS, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("compare", help="align two finetune runs and report time-to-threshold")
    s.add_argument("a", help="run config, run directory or metrics CSV")
    s.add_argument("b")
    s.add_argument("--threshold", type=float, default=0.8)
    s.add_argument("--out", help="directory for aligned CSVs and summary JSON")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("eval", help="reward statistics of ODE samples from a checkpoint")
    s.add_argument("config")
    s.add_argument("--checkpoint")
    s.add_argument("--n-samples", type=int, default=2000)
    s.add_argument("--steps", type=int, default=40)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AdvFlowError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
