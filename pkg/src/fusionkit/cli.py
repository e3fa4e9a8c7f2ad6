"""Command-line interface.

Exit codes: 0 success, 2 config error, 3 validation error, 4 numeric or
algorithm error, 5 I/O error. Set ``FUSIONKIT_LOG`` to error, warn, info or
debug to control logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import __version__
from .checkpoint_io import load_file
from .config import load_config
from .ensemble_eval import (
    ENSEMBLES,
    accuracy,
    load_dataset,
    load_predictions,
    save_predictions,
    weighted_ensemble,
)
from .errors import ConfigError, FusionError
from .pipeline import evaluate_tasks, format_matrix, inspect_taskvectors, run_pipeline
from .synth import synth_fixtures

log = logging.getLogger("fusionkit")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    level = os.environ.get("FUSIONKIT_LOG", "warn").lower()
    logging.basicConfig(
        level=LOG_LEVELS.get(level, logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def cmd_merge(args) -> int:
    cfg = load_config(args.config, args.overrides)
    result = run_pipeline(cfg)
    print(json.dumps(result.merge_report.to_dict(), sort_keys=True))
    if result.eval_report is not None:
        print(result.eval_report.format_table())
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, args.overrides)
    if not cfg.taskpool:
        raise ConfigError("evaluate needs a taskpool in the config")
    report = evaluate_tasks(load_file(args.model), cfg)
    if cfg.report_save_path is not None:
        report.save(cfg.report_save_path)
    print(report.format_table())
    return 0


def cmd_ensemble(args) -> int:
    preds = [load_predictions(p) for p in args.preds]
    if args.method == "weighted":
        if args.weights is None:
            raise ConfigError("--method weighted needs --weights")
        out = weighted_ensemble(preds, args.weights)
    else:
        if args.weights is not None:
            raise ConfigError(f"--weights is only valid with --method weighted, not {args.method}")
        out = ENSEMBLES[args.method](preds)
    save_predictions(out, args.out)
    if args.labels:
        ds = load_dataset(args.labels)
        print(f"accuracy: {accuracy(out, ds.labels):.4f}")
    return 0


def cmd_inspect(args) -> int:
    cfg = load_config(args.config, args.overrides)
    names, matrix = inspect_taskvectors(cfg, args.json)
    print(format_matrix(names, matrix))
    return 0


def cmd_synth(args) -> int:
    manifest = synth_fixtures(args.seed, args.out)
    print(json.dumps(manifest["reference_accuracy"], indent=2, sort_keys=True))
    return 0


def cmd_validate(args) -> int:
    cfg = load_config(args.config, args.overrides)
    report = cfg.modelpool.build().validate()
    print(report.describe())
    return 0 if report.mergeable else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusionkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fusionkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("merge", help="run the fusion pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("overrides", nargs="*", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the config's task pool")
    p.add_argument("--model", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("overrides", nargs="*", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ensemble", help="combine stored prediction matrices")
    p.add_argument("--preds", nargs="+", required=True)
    p.add_argument("--method", required=True, choices=sorted(ENSEMBLES))
    p.add_argument("--weights", nargs="+", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--labels", help="dataset container; prints ensemble accuracy")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("inspect", help="analysis utilities")
    isub = p.add_subparsers(dest="what", required=True)
    q = isub.add_parser("taskvec-cosine", help="cosine similarity matrix of task vectors")
    q.add_argument("--config", required=True)
    q.add_argument("--json", help="also write the matrix as JSON")
    q.add_argument("overrides", nargs="*", metavar="KEY=VALUE")
    q.set_defaults(func=cmd_inspect)

    p = sub.add_parser("synth", help="generate deterministic toy fixtures")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", help="check that a model pool is mergeable")
    p.add_argument("--config", required=True)
    p.add_argument("overrides", nargs="*", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FusionError as exc:
        print(f"error [{exc.module}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
