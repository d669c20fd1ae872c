"""Final accuracy as a function of which transformer block receives the generated adapter."""
import argparse
import dataclasses
import json
from pathlib import Path

from fedlscl import load_config, reference_config, run_seed_sweep


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", type=Path)
    parser.add_argument("--blocks", type=int, nargs="+", help="block indices (default: all)")
    parser.add_argument("--seeds", type=int, nargs="+")
    parser.add_argument("--out", type=Path, default=Path("runs/adapted_block.json"))
    args = parser.parse_args()
    base = load_config(args.config) if args.config else reference_config()
    blocks = args.blocks if args.blocks else range(base.backbone.num_blocks)

    results = {}
    for b in blocks:
        cfg = base.replace(backbone=dataclasses.replace(base.backbone, adapted_block=b))
        _, summary = run_seed_sweep(cfg, args.seeds)
        acc = summary["final_mean_accuracy"]
        results[b] = acc
        print(f"block {b}: {acc['mean']:.4f} +/- {acc['std']:.4f}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(results, indent=2))


if __name__ == "__main__":
    main()
