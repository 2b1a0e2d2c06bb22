"""Command-line interface.

Subcommands:

* ``train``          run a configured training job, writing metrics CSVs and
                     a binary parameter dump to the output directory
* ``epsilon``        evaluate the accountant for one mechanism configuration
* ``bound-ratio``    emit a (nbar, nb, ratio) CSV grid of the rejection
                     impairment relative to the subsampling term
* ``verify-gradient`` Monte-Carlo checks of the estimator's moment laws

``DPULR_THREADS`` caps worker threads for the per-example estimation loop.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import training
from .accountant import SrgmParams, ValidityError, best_epsilon, bound_ratio_rows
from .config import ConfigError, DataSpec, load_config
from .data import Dataset, load_mnist_idx, synth_dataset
from .diagnostics import gradient_diagnostics

__all__ = ["main"]


def _threads() -> int:
    raw = os.environ.get("DPULR_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise SystemExit(f"DPULR_THREADS must be an integer, got {raw!r}")


def _find_idx(directory: Path, base: str) -> Path:
    for candidate in (directory / base, directory / f"{base}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{base}[.gz] not found under {directory}")


def load_dataset(spec: DataSpec) -> tuple[Dataset, Dataset]:
    """Materialize (train, valid) datasets for a config's data section."""
    if spec.kind == "synth":
        full = synth_dataset(spec.seed, spec.n, spec.dim, spec.classes, spec.separation)
        train, valid = full.split(spec.valid_fraction, spec.seed)
        return train, valid
    directory = Path(spec.dir)
    train = load_mnist_idx(
        _find_idx(directory, "train-images-idx3-ubyte"),
        _find_idx(directory, "train-labels-idx1-ubyte"),
    )
    valid = load_mnist_idx(
        _find_idx(directory, "t10k-images-idx3-ubyte"),
        _find_idx(directory, "t10k-labels-idx1-ubyte"),
    )
    if spec.train_limit:
        train = train.take(spec.train_limit)
    return train, valid


def _cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    if config.data is None:
        raise ConfigError("config must include a 'data' section for training")
    train_data, valid_data = load_dataset(config.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params, records = training.train(
        config, train_data, valid=valid_data, threads=_threads()
    )
    eval_records = [r for r in records if r.is_eval_point]
    training.emit_metrics(eval_records, out / "metrics.csv")
    training.emit_controller_csv(records, out / "controller.csv")
    training.save_params(params, out / "params.bin")
    last = records[-1]
    summary = {
        "algorithm": config.algorithm,
        "total_steps": len(records),
        "epochs": config.epochs,
        "final_train_acc": last.train_acc,
        "final_valid_acc": last.valid_acc,
        "epsilon": last.epsilon,
        "alpha_star": last.alpha_star,
        "delta": config.privacy.delta,
        "regime_valid": last.regime_valid,
    }
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2) + "\n", encoding="utf-8"
    )
    print(json.dumps(summary))
    return 0


def _cmd_epsilon(args: argparse.Namespace) -> int:
    p = SrgmParams(
        sampling_rate=args.q,
        target_std=args.sigma0,
        batch_floor=args.nb,
        min_dataset_size=args.nbar,
    )
    try:
        report = best_epsilon(p, args.steps, args.delta, strict=args.strict)
    except ValidityError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(json.dumps(report.to_dict()))
    return 0


def _cmd_bound_ratio(args: argparse.Namespace) -> int:
    n_bars = np.unique(
        np.round(
            np.logspace(np.log10(args.nbar_min), np.log10(args.nbar_max), args.nbar_points)
        ).astype(int)
    )
    fracs = np.linspace(args.frac_min, args.frac_max, args.frac_points)
    rows = bound_ratio_rows(args.q, args.sigma0, args.alpha, n_bars, fracs)
    lines = ["nbar,nb,ratio"] + [f"{n},{nb},{r!r}" for n, nb, r in rows]
    text = "\n".join(lines) + "\n"
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text, encoding="utf-8", newline="\n")
    return 0


def _cmd_verify_gradient(args: argparse.Namespace) -> int:
    result = gradient_diagnostics(args.seed, args.sigma, args.samples)
    print(json.dumps(result))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpulr",
        description="Forward-learning training with differential privacy",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training job from a JSON config")
    p_train.add_argument("--config", required=True, help="path to the JSON run config")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.set_defaults(fn=_cmd_train)

    p_eps = sub.add_parser("epsilon", help="accountant query for one configuration")
    p_eps.add_argument("--q", type=float, required=True, help="sampling rate")
    p_eps.add_argument("--sigma0", type=float, required=True, help="noise-to-sensitivity ratio")
    p_eps.add_argument("--nb", type=int, required=True, help="batch rejection floor")
    p_eps.add_argument("--nbar", type=int, required=True, help="minimum dataset size")
    p_eps.add_argument("--steps", type=int, required=True, help="composed step count")
    p_eps.add_argument("--delta", type=float, default=1e-5)
    p_eps.add_argument(
        "--strict", action="store_true", help="only use proven Renyi orders"
    )
    p_eps.set_defaults(fn=_cmd_epsilon)

    p_ratio = sub.add_parser(
        "bound-ratio", help="CSV grid of impairment/subsampling term ratios"
    )
    p_ratio.add_argument("--q", type=float, default=0.01)
    p_ratio.add_argument("--sigma0", type=float, default=4.0)
    p_ratio.add_argument("--alpha", type=float, default=1.1)
    p_ratio.add_argument("--nbar-min", type=int, default=1_000)
    p_ratio.add_argument("--nbar-max", type=int, default=100_000)
    p_ratio.add_argument("--nbar-points", type=int, default=20)
    p_ratio.add_argument("--frac-min", type=float, default=0.5)
    p_ratio.add_argument("--frac-max", type=float, default=0.95)
    p_ratio.add_argument("--frac-points", type=int, default=10)
    p_ratio.add_argument("--out", default="-", help="output file or - for stdout")
    p_ratio.set_defaults(fn=_cmd_bound_ratio)

    p_verify = sub.add_parser(
        "verify-gradient", help="Monte-Carlo checks of the estimator moment laws"
    )
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument("--sigma", type=float, default=1e-2)
    p_verify.add_argument("--samples", type=int, default=100_000)
    p_verify.set_defaults(fn=_cmd_verify_gradient)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
