"""Deterministic numerical substrate.

Dense symmetric eigendecomposition, log-space binomial probabilities, and a
counter-based random number generator with label-derived substreams. All
binomial quantities stay in log space throughout: the rejection-sampling
impairment terms this package computes span 1e-10 scales and underflow in
linear space long before the inputs look unusual.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy import special

__all__ = [
    "DimensionError",
    "NumericError",
    "RngStream",
    "gaussian_vector",
    "log_binom_pmf",
    "log_binom_sf",
    "min_eigenvalue",
    "sym_eigendecompose",
]

# Relative tolerance (scaled by Frobenius norm) below which round-off
# negatives of PSD matrices are clamped to zero.
PSD_CLAMP_RTOL = 1e-9

# Allowed asymmetry |M - M^T| before a matrix is rejected as non-symmetric.
SYMMETRY_ATOL = 1e-9


class DimensionError(ValueError):
    """Operand shapes are incompatible with the operation."""


class NumericError(ValueError):
    """Operand values (NaN/inf or indefiniteness) violate a precondition."""


def _as_symmetric(m: np.ndarray) -> np.ndarray:
    """Validate and symmetrize a square matrix (average with its transpose)."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("matrix contains non-finite entries")
    asym = np.abs(m - m.T).max() if m.size else 0.0
    scale = max(1.0, float(np.linalg.norm(m)))
    if asym > SYMMETRY_ATOL * scale:
        raise NumericError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    return (m + m.T) / 2.0


def sym_eigendecompose(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecompose a symmetric matrix.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues sorted in
    descending order and eigenvectors as the matching columns of an
    orthogonal matrix Q, so that ``m ~= Q @ diag(w) @ Q.T``.
    """
    s = _as_symmetric(m)
    w, q = np.linalg.eigh(s)
    return w[::-1].copy(), q[:, ::-1].copy()


def min_eigenvalue(m: np.ndarray) -> float:
    """Smallest eigenvalue of a symmetric matrix.

    Tiny negatives from round-off on PSD inputs (within
    ``PSD_CLAMP_RTOL * ||m||_F``) are clamped to zero; genuinely negative
    eigenvalues are returned as-is.
    """
    s = _as_symmetric(m)
    lam = float(np.linalg.eigvalsh(s)[0])
    if -PSD_CLAMP_RTOL * float(np.linalg.norm(s)) <= lam < 0.0:
        return 0.0
    return lam


def _check_binom_args(k: int, n: int, q: float) -> None:
    if k > n:
        raise ValueError(f"k={k} exceeds n={n}")
    if k < 0 or n < 0:
        raise ValueError(f"k and n must be nonnegative, got k={k}, n={n}")
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must lie strictly in (0, 1), got q={q}")


def log_binom_pmf(k: int, n: int, q: float) -> float:
    """log of C(n,k) q^k (1-q)^(n-k), computed via log-gamma."""
    _check_binom_args(k, n, q)
    log_comb = (
        special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1)
    )
    return float(log_comb + k * math.log(q) + (n - k) * math.log1p(-q))


def log_binom_sf(k: int, n: int, q: float) -> float:
    """log of P(X > k) for X ~ Binomial(n, q).

    Summed by log-sum-exp over the whole upper range j = k+1..n, so the
    result is exact-to-rounding whichever side of the mode k falls on (no
    1 - cdf cancellation).
    """
    _check_binom_args(k, n, q)
    if k == n:
        return -math.inf
    log_comb_base = special.gammaln(n + 1)
    log_q, log_1mq = math.log(q), math.log1p(-q)
    pieces = []
    for lo in range(k + 1, n + 1, 1_000_000):
        j = np.arange(lo, min(lo + 1_000_000, n + 1), dtype=np.float64)
        terms = (
            log_comb_base
            - special.gammaln(j + 1)
            - special.gammaln(n - j + 1)
            + j * log_q
            + (n - j) * log_1mq
        )
        pieces.append(special.logsumexp(terms))
    return float(special.logsumexp(pieces))


@dataclasses.dataclass(frozen=True)
class RngStream:
    """A reproducible randomness source addressed by (seed, path).

    Streams are value objects: the same (seed, path) always produces the
    same sample sequence, and sibling paths yield statistically independent
    streams (numpy ``SeedSequence`` spawn keys feeding a counter-based
    Philox generator). Derive per-step / per-example / per-repeat children
    with :meth:`child` instead of sharing one stateful generator, so
    concurrent use needs no coordination.
    """

    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        for label in self.path:
            if not 0 <= int(label) < 2**32:
                raise ValueError(f"path labels must fit in uint32, got {label}")

    def child(self, *labels: int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(int(x) for x in labels))

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(seq))


def gaussian_vector(dim: int, sigma: float, rng: RngStream) -> np.ndarray:
    """i.i.d. N(0, sigma^2) vector, reproducible under fixed (seed, path)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if dim < 0:
        raise ValueError(f"dim must be nonnegative, got {dim}")
    return rng.generator().normal(0.0, sigma, size=dim)


def gaussian_matrix(shape: tuple[int, ...], sigma: float, rng: RngStream) -> np.ndarray:
    """Block of i.i.d. N(0, sigma^2) draws from one stream (row-major order)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return rng.generator().normal(0.0, sigma, size=shape)
