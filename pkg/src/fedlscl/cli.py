"""Command line entry point: ``run``, ``sweep`` and ``diagnose``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, FederationConfig, load_config, reference_config
from .federation import run_experiment, run_seed_sweep, write_outputs

ABLATION_FLAGS = ("collab", "smcf", "o2d")


def parse_ablation(text: str) -> tuple[str, bool]:
    name, sep, value = text.partition("=")
    if not sep or name not in ABLATION_FLAGS or value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected one of {'|'.join(ABLATION_FLAGS)}=on/off, got {text!r}")
    return name, value == "on"


def _config(args) -> FederationConfig:
    cfg = load_config(args.config) if args.config else reference_config()
    if args.ablation:
        cfg = cfg.with_ablation(**dict(args.ablation))
    return cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML config (default: the desk-scale reference config)")
    p.add_argument("--ablation", type=parse_ablation, action="append", default=[], metavar="FLAG=on|off",
                   help="toggle collab, smcf or o2d; may be repeated")
    p.add_argument("--out", type=Path, default=Path("runs/latest"), help="output directory")


def cmd_run(args) -> int:
    cfg = _config(args)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    bundle = run_experiment(cfg, seed)
    write_outputs([bundle], args.out)
    print(f"seed {seed}: final mean accuracy {bundle.final_mean():.4f} "
          f"(task-1 forgetting {bundle.task1_forgetting():.4f}) -> {args.out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    seeds = args.seeds if args.seeds else None
    bundles, summary = run_seed_sweep(cfg, seeds)
    write_outputs(bundles, args.out, summary)
    acc = summary["final_mean_accuracy"]
    print(f"seeds {summary['seeds']}: final mean accuracy {acc['mean']:.4f} +/- {acc['std']:.4f} -> {args.out}")
    return 0


def cmd_diagnose(args) -> int:
    cfg = _config(args)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    bundle = run_experiment(cfg, seed, diagnostics=True)
    write_outputs([bundle], args.out)
    rows = []
    for rep in bundle.server_reports:
        for client, entry in sorted(rep.get("clients", {}).items()):
            rows.append({"task": rep["task"], "round": rep["round"], "client": client, **entry})
    (args.out / "consensus.json").write_text(json.dumps(rows, indent=2))
    if not rows:
        print("no server consensus reports (collaboration or O2D is off)")
        return 0
    print(f"{'task':>4} {'round':>5} {'client':>6} {'distill':>10} {'reg':>10} {'dist_mean':>10} {'in_box':>7}")
    for r in rows:
        print(f"{r['task']:>4} {r['round']:>5} {r['client']:>6} {r['distill']:>10.4g} {r['regularizer']:>10.4g} "
              f"{r.get('consensus_mean_dist', np.nan):>10.4g} {r.get('consensus_in_box', np.nan):>7.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedlscl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="one seed of the full protocol")
    _add_common(p)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="every configured seed, with mean and std")
    _add_common(p)
    p.add_argument("--seeds", type=int, nargs="+", help="override the configured seeds")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("diagnose", help="one seed with per-round server consensus reports")
    _add_common(p)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
