"""Final accuracy, forgetting and upload size as the replay buffer per class grows."""
import argparse
import dataclasses
import json
from pathlib import Path

import numpy as np

from fedlscl import load_config, reference_config, run_seed_sweep


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", type=Path)
    parser.add_argument("--sizes", type=int, nargs="+", default=[1, 5, 10, 20, 40])
    parser.add_argument("--seeds", type=int, nargs="+")
    parser.add_argument("--out", type=Path, default=Path("runs/buffer_size.json"))
    args = parser.parse_args()
    base = load_config(args.config) if args.config else reference_config()

    results = {}
    for m in args.sizes:
        cfg = base.replace(hyper=dataclasses.replace(base.hyper, buffer_per_class=m))
        bundles, summary = run_seed_sweep(cfg, args.seeds)
        upload = float(np.mean([v for b in bundles for v in b.payload_bytes.values()]))
        acc, fgt = summary["final_mean_accuracy"], summary["forgetting_task1"]
        results[m] = {"accuracy": acc, "forgetting_task1": fgt, "mean_upload_bytes": upload}
        print(f"M={m:<3} accuracy {acc['mean']:.4f} +/- {acc['std']:.4f}  "
              f"forgetting {fgt['mean']:.4f}  upload {upload:.0f} B")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(results, indent=2))


if __name__ == "__main__":
    main()
