"""Batch subsampling with rejection.

Each dataset index is included independently with probability q; draws whose
size falls below the floor ``min_batch`` are rejected and redrawn. The
conditional law of an accepted draw is the Poisson-subsampled batch given
size >= min_batch, which is the mechanism the privacy accounting analyzes.

A fixed-size permutation sampler is also provided for efficiency-minded
runs, with the explicit caveat that the accounting does not cover it.
"""

from __future__ import annotations

import dataclasses
import warnings

import numpy as np

from .numkit import RngStream, log_binom_pmf, log_binom_sf

__all__ = ["BatchDraw", "PermutationSampler", "draw_batch", "batch_size_pmf"]

# Attempts before giving up on pathological configs (min_batch >> q*N).
MAX_REJECTIONS = 1_000_000


class SamplerConfigError(ValueError):
    """Sampler parameters are inconsistent with the dataset."""


@dataclasses.dataclass(frozen=True)
class BatchDraw:
    """An accepted batch: sorted unique dataset indices plus the number of
    rejected draws that preceded it."""

    indices: np.ndarray
    rejections: int

    def __len__(self) -> int:
        return int(self.indices.size)


def _check_args(dataset_size: int, q: float, min_batch: int) -> None:
    if not 0.0 < q <= 1.0:
        raise ValueError(f"sampling rate q must lie in (0, 1], got {q}")
    if not 1 <= min_batch <= dataset_size:
        raise SamplerConfigError(
            f"min_batch={min_batch} outside [1, dataset_size={dataset_size}]"
        )


def draw_batch(
    dataset_size: int, q: float, min_batch: int, rng: RngStream
) -> BatchDraw:
    """Draw a Poisson-subsampled batch, rejecting draws smaller than min_batch.

    The privacy analysis assumes min_batch <= q * dataset_size; callers
    outside that regime get a warning, not an error.
    """
    _check_args(dataset_size, q, min_batch)
    if min_batch > q * dataset_size:
        warnings.warn(
            f"min_batch={min_batch} exceeds q*N={q * dataset_size:.1f}; "
            "outside the analyzed regime and rejection may be very slow",
            stacklevel=2,
        )
    gen = rng.generator()
    rejections = 0
    while rejections <= MAX_REJECTIONS:
        mask = gen.random(dataset_size) < q
        size = int(mask.sum())
        if size >= min_batch:
            return BatchDraw(indices=np.flatnonzero(mask), rejections=rejections)
        rejections += 1
    raise SamplerConfigError(
        f"no batch of size >= {min_batch} accepted after {MAX_REJECTIONS} draws "
        f"(q={q}, dataset_size={dataset_size})"
    )


def batch_size_pmf(
    dataset_size: int, q: float, min_batch: int
) -> list[tuple[int, float]]:
    """Exact pmf of the accepted batch size.

    p(k) = binom(k; N, q) / P(X >= min_batch) for k in [min_batch, N].
    """
    _check_args(dataset_size, q, min_batch)
    if q == 1.0:
        return [(dataset_size, 1.0)]
    log_norm = log_binom_sf(min_batch - 1, dataset_size, q)
    sizes = range(min_batch, dataset_size + 1)
    return [
        (k, float(np.exp(log_binom_pmf(k, dataset_size, q) - log_norm)))
        for k in sizes
    ]


class PermutationSampler:
    """Fixed-size batches from a fresh random permutation each epoch.

    This is the practical batching mode; the RDP accounting in this package
    analyzes Poisson subsampling with rejection, not permutation batching,
    so a warning is emitted once on construction.
    """

    def __init__(self, dataset_size: int, batch_size: int, rng: RngStream):
        if not 1 <= batch_size <= dataset_size:
            raise SamplerConfigError(
                f"batch_size={batch_size} outside [1, {dataset_size}]"
            )
        self._n = dataset_size
        self._batch = batch_size
        self._rng = rng
        warnings.warn(
            "permutation batching selected: the privacy analysis covers "
            "Poisson subsampling with rejection only; reported privacy "
            "costs assume that mechanism",
            stacklevel=2,
        )

    def epoch_batches(self, epoch: int) -> list[BatchDraw]:
        """Disjoint fixed-size batches for one epoch (ragged tail dropped)."""
        perm = self._rng.child(epoch).generator().permutation(self._n)
        n_full = self._n // self._batch
        return [
            BatchDraw(
                indices=np.sort(perm[i * self._batch : (i + 1) * self._batch]),
                rejections=0,
            )
            for i in range(n_full)
        ]
