#!/usr/bin/env python3
"""Contour plot of the rejection-impairment ratio across dataset sizes and
batch floors, one panel per sampling rate. Writes a CSV per rate plus a PNG.

Requires matplotlib for the plot (the CSVs are written regardless).
"""

import argparse
from pathlib import Path

import numpy as np

from dpulr.accountant import bound_ratio_rows


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="runs/bound_ratio")
    parser.add_argument("--alpha", type=float, default=1.1)
    parser.add_argument("--sigma0", type=float, default=4.0)
    parser.add_argument("--rates", type=float, nargs="+", default=[0.005, 0.01, 0.05])
    parser.add_argument("--nbar-points", type=int, default=25)
    parser.add_argument("--frac-points", type=int, default=25)
    args = parser.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_bars = np.unique(np.round(np.logspace(3, 5, args.nbar_points)).astype(int))
    fracs = np.linspace(0.05, 0.95, args.frac_points)

    grids = {}
    for q in args.rates:
        rows = bound_ratio_rows(q, args.sigma0, args.alpha, n_bars, fracs)
        path = out / f"ratio_q{q:g}.csv"
        path.write_text(
            "nbar,nb,ratio\n" + "\n".join(f"{n},{nb},{r!r}" for n, nb, r in rows) + "\n",
            encoding="utf-8",
        )
        grids[q] = np.array([r for _, _, r in rows]).reshape(len(n_bars), len(fracs))
        print(f"wrote {path}")

    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib not available; skipping the plot")
        return 0

    fig, axes = plt.subplots(1, len(args.rates), figsize=(5 * len(args.rates), 4))
    axes = np.atleast_1d(axes)
    for ax, q in zip(axes, args.rates):
        with np.errstate(divide="ignore"):
            levels = np.log10(np.maximum(grids[q], 1e-300))
        cs = ax.contourf(fracs, n_bars, levels, levels=20, cmap="viridis")
        ax.contour(fracs, n_bars, levels, levels=[-3], colors="red")
        ax.set_yscale("log")
        ax.set_xlabel("batch floor / (q N)")
        ax.set_ylabel("minimum dataset size N")
        ax.set_title(f"log10 impairment ratio, q={q:g}")
        fig.colorbar(cs, ax=ax)
    fig.tight_layout()
    png = out / "bound_ratio.png"
    fig.savefig(png, dpi=120)
    print(f"wrote {png} (red contour: ratio = 1e-3)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
