"""Command-line entry point.

Subcommands run experiment presets; `run` executes a config file verbatim.
Exit codes: 0 success, 1 configuration or usage error, 2 when at least one
cell failed at runtime (or verification found a mismatch).

The default output root is $CRETTA_RESULTS_ROOT, falling back to ./results;
each experiment writes under <root>/<kind>.
"""

from __future__ import annotations

import argparse
import os
import sys

import yaml

from .config import ConfigError, config_from_dict
from .experiments import (KIND_DEFAULT_BETAS, KIND_DEFAULT_METHODS,
                          run_experiment, verify_experiment)

OUTPUT_ROOT_ENV = "CRETTA_RESULTS_ROOT"

_EXPERIMENT_COMMANDS = ("run", "compare", "ablate", "sweep", "gradual",
                        "noniid")


def _add_common_flags(parser):
    parser.add_argument("--config", default=None,
                        help="YAML config file; defaults apply when omitted")
    parser.add_argument("--out", default=None,
                        help="output directory (default: "
                             f"${OUTPUT_ROOT_ENV}/<kind> or results/<kind>)")
    parser.add_argument("--seeds", default=None,
                        help="comma-separated seed list overriding the "
                             "config")
    parser.add_argument("--overwrite", action="store_true",
                        help="replace an existing non-empty output directory")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads for independent cells")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cretta",
        description="Test-time adaptation experiments on synthetic "
                    "distribution shifts.")
    sub = parser.add_subparsers(dest="command", required=True)
    descriptions = {
        "run": "execute a config file as-is",
        "compare": "baselines vs the pairwise method on corrupted streams",
        "ablate": "objective, weighting, pairing, and buffer ablations",
        "sweep": "beta grid sweep",
        "gradual": "gradually increasing severity with a clean re-check",
        "noniid": "Dirichlet class-imbalanced streams over a delta grid",
    }
    for name in _EXPERIMENT_COMMANDS:
        p = sub.add_parser(name, help=descriptions[name])
        _add_common_flags(p)
    v = sub.add_parser("verify", help="recompute an experiment from its "
                                      "config echo and byte-compare")
    v.add_argument("--out", required=True, help="experiment directory")
    v.add_argument("--threads", type=int, default=1)
    return parser


def _parse_seeds(text: str):
    try:
        seeds = [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, "
                          f"got {text!r}")
    if not seeds:
        raise ConfigError("--seeds must name at least one seed")
    return seeds


def _load_raw_config(path):
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})")
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def build_config(command: str, args):
    raw = _load_raw_config(args.config)
    if command != "run":
        raw["kind"] = command
        raw.setdefault("methods", list(KIND_DEFAULT_METHODS[command]))
        if command == "sweep":
            raw.setdefault("betas", list(KIND_DEFAULT_BETAS))
    if args.seeds is not None:
        raw["seeds"] = _parse_seeds(args.seeds)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        raw["threads"] = args.threads
    return config_from_dict(raw)


def resolve_out_dir(cfg, args) -> str:
    if args.out is not None:
        return args.out
    if cfg.out_dir is not None:
        return cfg.out_dir
    root = os.environ.get(OUTPUT_ROOT_ENV, "results")
    return os.path.join(root, cfg.kind)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "verify":
        try:
            mismatches = verify_experiment(args.out, threads=args.threads)
        except (FileNotFoundError, ConfigError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        if mismatches:
            for rel in mismatches:
                print(f"mismatch: {rel}", file=sys.stderr)
            return 2
        print("verified: all artifacts recompute byte-identically")
        return 0

    try:
        cfg = build_config(args.command, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    out_dir = resolve_out_dir(cfg, args)
    try:
        code = run_experiment(cfg, out_dir, overwrite=args.overwrite,
                              threads=cfg.threads)
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if code == 0:
        print(f"done: results under {out_dir}")
    else:
        print(f"completed with failed cells; see {out_dir}/cells.tsv",
              file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
