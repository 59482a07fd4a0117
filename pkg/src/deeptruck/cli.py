"""Command-line entry point: ``deeptruck <subcommand> ...``.

Global flags (``--seed``, ``--threads``, ``--out``) go before or after the
subcommand.  Every subcommand writes a ``run.json`` and ``checksums.sha256``
next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import config as cfgmod
from . import pipeline as pl


def _global(parser: argparse.ArgumentParser, top: bool) -> None:
    # subparsers use SUPPRESS so a flag given before the subcommand is not reset
    default = None if top else argparse.SUPPRESS
    parser.add_argument("--seed", type=int, default=default, help="random seed")
    parser.add_argument("--threads", type=int, default=default, help="BLAS thread limit")
    parser.add_argument("--out", type=Path, default=default, help="output directory (train-model/train-policy also accept a .ckpt path)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deeptruck", description="Deep replica truck models and CACC policy learning.")
    _global(p, True)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-cycle", help="generate a driving-cycle dataset on the surrogate plant")
    s.add_argument("--config", type=Path)
    s.add_argument("--hours", type=float, default=4.0)
    s.add_argument("--validation-hours", type=float, default=0.0)

    s = sub.add_parser("train-model", help="fit a replica model to a dataset")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--config", type=Path)

    s = sub.add_parser("validate-model", help="open-loop error statistics on held-out episodes")
    s.add_argument("--model", type=Path, required=True)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--config", type=Path)
    s.add_argument("--trials", type=int, default=90)
    s.add_argument("--horizon", type=int, default=400)

    s = sub.add_parser("train-policy", help="policy-gradient training in the replica CACC environment")
    s.add_argument("--model", type=Path, required=True)
    s.add_argument("--config", type=Path)

    s = sub.add_parser("eval-policy", help="deterministic rollouts with error statistics")
    s.add_argument("--policy", type=Path, required=True)
    s.add_argument("--model", type=Path, required=True)
    s.add_argument("--config", type=Path)
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--plant-trials", type=int, default=10)

    s = sub.add_parser("run", help="run a full experiment manifest")
    s.add_argument("manifest", type=Path)

    for name, sp in sub.choices.items():
        _global(sp, False)
    return p


_SECTION = {
    "gen-cycle": "cyclegen",
    "train-model": "train",
    "validate-model": "train",
    "train-policy": "policy",
    "eval-policy": "cacc",
}
_PRIMARY_CKPT = {"train-model": "model.ckpt", "train-policy": "policy_final.ckpt"}
_DEFAULT_OUT = {
    "gen-cycle": "data",
    "train-model": "model",
    "validate-model": "validation",
    "train-policy": "policy",
    "eval-policy": "eval",
    "run": None,
}


def _dispatch(args) -> dict | Path:
    if args.command == "run":
        return pl.run_experiment(args.manifest, args.out, args.seed)

    for name in ("data", "model", "policy"):
        path = getattr(args, name, None)
        if path is not None and not path.exists():
            raise FileNotFoundError(f"--{name} not found: {path}")
    configs = cfgmod.load_configs(args.config, default_section=_SECTION[args.command])
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out or _DEFAULT_OUT[args.command])
    ckpt = None
    if out.suffix == ".ckpt" and args.command in _PRIMARY_CKPT:
        # ``--out path/name.ckpt`` names the checkpoint; the other outputs go beside it
        ckpt, out = out, out.parent
    out.mkdir(parents=True, exist_ok=True)
    inputs = {}
    if args.command == "gen-cycle":
        summary = pl.stage_gen_data(out, configs, seed, args.hours, args.validation_hours)
    elif args.command == "train-model":
        inputs = {"data": args.data}
        summary = pl.stage_train_model(out, configs, seed, args.data)
    elif args.command == "validate-model":
        inputs = {"model": args.model, "data": args.data}
        summary = pl.stage_validate_model(out, configs, seed, args.model, args.data, args.trials, args.horizon)
    elif args.command == "train-policy":
        inputs = {"model": args.model}
        summary = pl.stage_train_policy(out, configs, seed, args.model)
    else:
        inputs = {"model": args.model, "policy": args.policy}
        summary = pl.stage_eval_policy(out, configs, seed, args.policy, args.model, args.trials, args.plant_trials)
    if ckpt is not None:
        (out / _PRIMARY_CKPT[args.command]).replace(ckpt)
        summary["checkpoint"] = str(ckpt)
    pl.write_run_record(out, args.command, seed, configs, inputs, {"summary": summary})
    pl.write_checksums(out)
    return summary


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s"
    )
    try:
        with threadpool_limits(limits=args.threads):
            result = _dispatch(args)
    except (pl.ResolutionError, pl.StageError, cfgmod.ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if isinstance(result, Path):
        print(result)
    else:
        print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
