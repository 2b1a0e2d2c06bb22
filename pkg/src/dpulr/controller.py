"""Dynamic privacy controller.

Before estimating gradients for a layer, the controller computes each
example's standard covariance L0^2 J^T J from the clean forward pass, sums
them over the batch, and picks the injected-noise scale sigma so that the
batch-summed estimate's covariance has minimum eigenvalue exactly
target_std^2 * clip_bound^2:

    sigma^2 = min_eig(sum of standard covariances) / (K C^2 target_std^2).

The largest admissible sigma is chosen because the proxy's variance scales
as 1/sigma^2, so any smaller sigma would only hurt estimation accuracy.

When the covariance sum is rank deficient (or its minimum eigenvalue is
numerically zero) randomness is missing along some directions and no sigma
can restore it through the forward pass. The controller then switches to a
remediation plan: the working sigma applies the same rule as if the
deficient directions were absent (so the smallest healthy eigenvalue sits
exactly at the floor), plus independent Gaussian top-up noise per
eigen-direction added to the summed gradient, with variances
max(0, target^2 C^2 - lambda_i/(sigma^2 K)) so the combined covariance
meets the floor in every direction while the realized directions keep
their signal.

For a linear layer v = Wx + b the per-example Gram in flattened parameter
space is block diagonal over output units with identical blocks
(x,1)(x,1)^T, so everything above runs on the (in_dim+1)-wide augmented
block instead of the theta_dim-wide matrix.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .network import ForwardTrace
from .numkit import NumericError, PSD_CLAMP_RTOL, RngStream, sym_eigendecompose

__all__ = [
    "ControllerReport",
    "LayerNoiseDecision",
    "check_assumption_full_rank",
    "decide_layer_noise",
    "linear_block_covariance_sum",
    "remediation_noise",
    "select_sigma",
    "standard_covariance",
]

# Eigenvalues below RANK_RTOL * lambda_max count as zero for rank purposes.
RANK_RTOL = 1e-9
# Remediation triggers when min_eig < TRIGGER_RTOL * trace.
TRIGGER_RTOL = 1e-12
# Within the remediation path, directions with eigenvalues below
# REMEDY_RTOL * lambda_max are treated as deficient when sizing the working
# sigma: ill-conditioned covariance sums (batch Grams near the rank
# boundary) otherwise drive sigma to ~0, which blows up the estimator's
# variance, while sizing by lambda_max over-smooths the loss. Directions
# below the floor at the working sigma are topped up regardless, so this
# constant trades utility, never the privacy floor.
REMEDY_RTOL = 1e-3
# Forward-noise std when the covariance sum is exactly zero (all losses
# zero); the isotropic extra noise then supplies the whole privacy floor.
FALLBACK_SIGMA = 1.0


@dataclasses.dataclass
class ControllerReport:
    """Per-layer outcome of one controller evaluation."""

    layer: int
    min_eig: float
    sigma: float
    remediated: bool
    extra_noise_variances: np.ndarray  # empty when not remediated


@dataclasses.dataclass
class RemediationPlan:
    """Directional top-up noise restoring the variance floor."""

    sigma: float  # working forward-noise std
    variances: np.ndarray  # per eigen-direction, aligned with basis columns
    basis: np.ndarray  # orthogonal Q, columns are eigen-directions


@dataclasses.dataclass
class LayerNoiseDecision:
    sigma: float
    min_eig: float
    remediated: bool
    plan: RemediationPlan | None


def standard_covariance(trace: ForwardTrace, jac: np.ndarray) -> np.ndarray:
    """Standard covariance L0^2 J^T J of one example's gradient proxy."""
    if jac.ndim != 2:
        raise NumericError(f"jacobian must be 2-D, got shape {jac.shape}")
    gram = jac.T @ jac
    cov = trace.loss**2 * gram
    return (cov + cov.T) / 2.0


def linear_block_covariance_sum(xs: np.ndarray, losses: np.ndarray) -> np.ndarray:
    """Augmented-input block of a batch's standard-covariance sum.

    For a linear layer the full sum is (a permutation of)
    I_out kron S with S = sum_d L0(d)^2 (x_d, 1)(x_d, 1)^T, so S carries the
    whole spectrum. xs is (B, in_dim), losses the clean losses (B,).
    """
    xt = np.concatenate([xs, np.ones((xs.shape[0], 1))], axis=1)
    s = (xt * (losses**2)[:, None]).T @ xt
    return (s + s.T) / 2.0


def _checked_eigs(cov_sum: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Descending eigenvalues/vectors with PSD validation and clamping."""
    w, q = sym_eigendecompose(cov_sum)
    tol = PSD_CLAMP_RTOL * max(1.0, float(np.linalg.norm(cov_sum)))
    if w[-1] < -tol:
        raise NumericError(
            f"covariance sum is not PSD (min eigenvalue {w[-1]:.3e})"
        )
    return np.maximum(w, 0.0), q


def _decide(
    eigs: np.ndarray,
    basis: np.ndarray,
    repeats: int,
    clip_bound: float,
    target_std: float,
) -> LayerNoiseDecision:
    w = eigs
    d = w.size
    lam_max, lam_min = float(w[0]), float(w[-1])
    trace = float(w.sum())
    threshold = max(RANK_RTOL * max(lam_max, 0.0), TRIGGER_RTOL * trace)
    rank = int(np.count_nonzero(w > threshold))
    floor = target_std**2 * clip_bound**2
    deficient = rank < d or lam_min <= 0.0
    if not deficient:
        sigma = float(np.sqrt(lam_min / (repeats * floor)))
        return LayerNoiseDecision(sigma, lam_min, False, None)
    if rank == 0:
        plan = RemediationPlan(
            sigma=FALLBACK_SIGMA,
            variances=np.full(d, floor),
            basis=np.eye(d),
        )
        return LayerNoiseDecision(FALLBACK_SIGMA, lam_min, True, plan)
    # Working sigma as if the deficient directions were absent: the noise
    # rule applied to the smallest healthy eigenvalue (healthy relative to
    # lambda_max, so a near-zero tail of an ill-conditioned sum does not
    # set sigma). Directions at or above the reference meet the floor
    # through the forward noise alone (their top-up clamps to zero);
    # everything below it is topped up.
    healthy = w[w >= REMEDY_RTOL * lam_max]
    lam_ref = float(healthy[-1])
    sigma = float(np.sqrt(lam_ref / (repeats * floor)))
    variances = floor * np.maximum(0.0, 1.0 - w / lam_ref)
    plan = RemediationPlan(sigma=sigma, variances=variances, basis=basis)
    return LayerNoiseDecision(sigma, lam_min, True, plan)


def _check_scales(repeats: int, clip_bound: float, target_std: float) -> None:
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    if clip_bound <= 0 or target_std <= 0:
        raise ValueError(
            f"clip_bound and target_std must be positive, got "
            f"{clip_bound}, {target_std}"
        )


def decide_layer_noise(
    cov_sum: np.ndarray, repeats: int, clip_bound: float, target_std: float
) -> LayerNoiseDecision:
    """Full controller decision (sigma or remediation plan) for one layer.

    ``cov_sum`` may be the dense theta-space covariance sum or the
    augmented block from :func:`linear_block_covariance_sum`; the spectra
    coincide, so the decision does too.
    """
    _check_scales(repeats, clip_bound, target_std)
    w, q = _checked_eigs(cov_sum)
    return _decide(w, q, repeats, clip_bound, target_std)


def select_sigma(
    batch_cov_sum: np.ndarray,
    repeats: int,
    clip_bound: float,
    target_std: float,
) -> tuple[float | None, float]:
    """Largest admissible noise std for a batch-covariance sum.

    Returns ``(sigma, min_eig)``; sigma is None when the covariance sum is
    rank deficient and the remediation path must be taken instead.
    """
    decision = decide_layer_noise(batch_cov_sum, repeats, clip_bound, target_std)
    if decision.remediated:
        return None, decision.min_eig
    return decision.sigma, decision.min_eig


def remediation_noise(
    batch_cov_sum: np.ndarray,
    repeats: int,
    clip_bound: float,
    target_std: float,
    rng: RngStream,
) -> np.ndarray:
    """Gradient-space extra noise restoring the variance floor.

    With the covariance sum exactly zero this degrades to isotropic
    N(0, target^2 C^2 I) noise.
    """
    decision = decide_layer_noise(batch_cov_sum, repeats, clip_bound, target_std)
    plan = decision.plan
    if plan is None:
        # Already at or above the floor in every direction relative to the
        # working sigma: nothing to add.
        return np.zeros(batch_cov_sum.shape[0])
    xi = rng.generator().standard_normal(plan.variances.size)
    return plan.basis @ (np.sqrt(plan.variances) * xi)


def block_remediation_noise(
    plan: RemediationPlan, out_dim: int, rng: RngStream
) -> tuple[np.ndarray, np.ndarray]:
    """Remediation noise for a linear layer in (weight, bias) form.

    One independent draw per output unit in the augmented block basis;
    returns an (out, in) weight increment and an (out,) bias increment.
    """
    aug = plan.variances.size
    xi = rng.generator().standard_normal((out_dim, aug))
    rows = (xi * np.sqrt(plan.variances)) @ plan.basis.T
    return rows[:, : aug - 1], rows[:, aug - 1]


def check_assumption_full_rank(batch_cov_sum: np.ndarray) -> tuple[bool, int]:
    """Whether the covariance sum is full rank, plus its numerical rank."""
    w, _ = _checked_eigs(batch_cov_sum)
    lam_max = float(w[0]) if w.size else 0.0
    rank = int(np.count_nonzero(w > RANK_RTOL * max(lam_max, 0.0)))
    return rank == w.size, rank
