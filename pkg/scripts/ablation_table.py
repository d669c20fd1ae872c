"""Run the four ablation arms over the configured seeds and print final accuracy and task-1 forgetting."""
import argparse
import json
from pathlib import Path

from fedlscl import load_config, reference_config, run_seed_sweep
from fedlscl.federation import write_outputs

ARMS = {
    "full": {},
    "no-O2D": dict(o2d=False),
    "no-SMCF": dict(smcf=False),
    "no-collab": dict(collab=False, smcf=False, o2d=False),
}


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", type=Path)
    parser.add_argument("--seeds", type=int, nargs="+")
    parser.add_argument("--out", type=Path, default=Path("runs/ablation"))
    args = parser.parse_args()
    base = load_config(args.config) if args.config else reference_config()

    table = {}
    print(f"{'arm':<10} {'accuracy':>18} {'task-1 forgetting':>20}")
    for name, flags in ARMS.items():
        bundles, summary = run_seed_sweep(base.with_ablation(**flags), args.seeds)
        write_outputs(bundles, args.out / name, summary)
        acc, fgt = summary["final_mean_accuracy"], summary["forgetting_task1"]
        table[name] = {"accuracy": acc, "forgetting_task1": fgt}
        print(f"{name:<10} {acc['mean']:>10.4f} +/- {acc['std']:.4f} {fgt['mean']:>12.4f} +/- {fgt['std']:.4f}")
    (args.out / "table.json").write_text(json.dumps(table, indent=2))


if __name__ == "__main__":
    main()
