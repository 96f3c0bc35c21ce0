"""Command line interface.

Usage::

    critcascade SUBCOMMAND [--config PATH] [--seed N] [--workers N] [--out DIR] [--replicas N]

Subcommands map to experiment kinds (``martingales`` runs
``tree-martingales``, ``cwalk`` runs ``conditioned-walk`` and ``envelope``
runs ``spine-envelope``).  Exit status is 0 on success, 2 when the
acceptance suite reports a failed criterion, and 1 on errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .config import ExperimentConfig, load_config
from .errors import CritCascadeError

__all__ = ["main", "build_parser", "SUBCOMMANDS"]

SUBCOMMANDS = {
    "model-diagnose": "model-diagnose",
    "grow": "grow",
    "martingales": "tree-martingales",
    "renewal": "renewal",
    "cwalk": "conditioned-walk",
    "spine": "spine",
    "envelope": "spine-envelope",
    "phase-scan": "phase-scan",
    "verify": "verify",
}

_HELP = {
    "model-diagnose": "boundary-case moments of the configured offspring law",
    "grow": "grow trees and record population sizes",
    "martingales": "additive, derivative and truncated martingales per replica",
    "renewal": "tabulate the renewal function",
    "cwalk": "sample paths of the conditioned walk",
    "spine": "sample spines with side-subtree summaries",
    "envelope": "compare spine ball masses with the LIL and psi envelopes",
    "phase-scan": "normalized partition functions over a grid of beta",
    "verify": "run the acceptance suite",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="critcascade",
                                     description="Critical branching random walks and cascade measures.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=_HELP[name])
        p.add_argument("--config", help="experiment configuration (INI)")
        p.add_argument("--seed", type=int, help="master seed (overrides the configuration)")
        p.add_argument("--workers", type=int, help="worker processes")
        p.add_argument("--out", help="output directory")
        p.add_argument("--replicas", type=int, help="number of replicas (overrides the configuration)")
        if name == "verify":
            p.add_argument("--profile", choices=("quick", "full"), help="sample-size profile")
    return parser


def _config_from_args(args) -> ExperimentConfig:
    kind = SUBCOMMANDS[args.command]
    cfg = load_config(args.config) if args.config else ExperimentConfig(kind=kind, out=f"runs/{args.command}")
    cfg = replace(cfg, kind=kind)
    if getattr(args, "profile", None):
        cfg = replace(cfg, params=replace(cfg.params, profile=args.profile))
    return cfg.with_overrides(seed=args.seed, workers=args.workers, out=args.out, reps=args.replicas)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        from .runner import run

        cfg = _config_from_args(args)
        manifest = run(cfg)
    except CritCascadeError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"out": cfg.out, "config_hash": manifest.config_hash,
                      "outputs": len(manifest.outputs), "summary": manifest.summary},
                     indent=2, sort_keys=True, default=str))
    if cfg.kind == "verify" and manifest.summary.get("failed"):
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
