#!/usr/bin/env python3
"""Desk-scale forward-noise training run on synthetic blobs.

Runs anywhere (no dataset files needed); writes metrics.csv,
controller.csv, params.bin and summary.json under --out.
"""

import argparse
import json
import tempfile
from pathlib import Path

from dpulr.cli import main as cli_main

CONFIG = {
    "architecture": [
        {"in": 8, "out": 6, "activation": "gelu"},
        {"in": 6, "out": 3, "activation": "identity"},
    ],
    "privacy": {
        "sampling_rate": 0.01,
        "target_std": 1.0,
        "batch_floor": 60,
        "repeats": 100,
        "clip_bound": 1.0,
        "delta": 1e-5,
        "min_dataset_size": 6400,
    },
    "optimizer": {"name": "adam", "learning_rate": 0.03},
    "epochs": 5,
    "seed": 3,
    "data": {"kind": "synth", "n": 8000, "dim": 8, "classes": 3,
             "separation": 10.0, "seed": 4},
}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/desk_synth")
    parser.add_argument("--algorithm", choices=["dp-ulr", "dp-sgd"], default="dp-ulr")
    parser.add_argument("--seed", type=int, default=CONFIG["seed"])
    args = parser.parse_args()

    config = dict(CONFIG, algorithm=args.algorithm, seed=args.seed)
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as f:
        json.dump(config, f)
        config_path = f.name
    Path(args.out).mkdir(parents=True, exist_ok=True)
    return cli_main(["train", "--config", config_path, "--out", args.out])


if __name__ == "__main__":
    raise SystemExit(main())
