#!/usr/bin/env python3
"""Desk-scale MNIST run: 3-layer MLP on a 10k subset, 5 epochs.

Expects the four MNIST IDX files (plain or .gz) under --data-dir:
train-images-idx3-ubyte, train-labels-idx1-ubyte,
t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte.
"""

import argparse
import json
import tempfile
from pathlib import Path

from dpulr.cli import main as cli_main


def build_config(data_dir: str, algorithm: str, seed: int) -> dict:
    return {
        "architecture": [
            {"in": 784, "out": 32, "activation": "gelu"},
            {"in": 32, "out": 16, "activation": "gelu"},
            {"in": 16, "out": 10, "activation": "identity"},
        ],
        "privacy": {
            "sampling_rate": 0.05,
            "target_std": 1.0,
            "batch_floor": 450,
            "repeats": 100,
            "clip_bound": 1.0,
            "delta": 1e-5,
            "min_dataset_size": 10000,
        },
        "optimizer": {"name": "adam", "learning_rate": 0.03},
        "epochs": 5,
        "seed": seed,
        "algorithm": algorithm,
        "data": {"kind": "mnist", "dir": data_dir, "train_limit": 10000},
    }


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data-dir", default="data/mnist")
    parser.add_argument("--out", default="runs/desk_mnist")
    parser.add_argument("--algorithm", choices=["dp-ulr", "dp-sgd"], default="dp-ulr")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    config = build_config(args.data_dir, args.algorithm, args.seed)
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as f:
        json.dump(config, f)
        config_path = f.name
    Path(args.out).mkdir(parents=True, exist_ok=True)
    return cli_main(["train", "--config", config_path, "--out", args.out])


if __name__ == "__main__":
    raise SystemExit(main())
