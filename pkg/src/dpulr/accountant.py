"""Renyi-DP accounting for rejection-sampled Gaussian mechanisms.

A training step subsamples each record independently with probability q,
rejects batches smaller than a floor, and releases a sum whose per-direction
standard deviation the controller keeps at least target_std * C. Each such
step satisfies (alpha, gamma)-RDP with

    gamma = q * pmf(floor-1; N, q) / (1 - cdf(floor-1; N, q))
            + 2 q^2 alpha / target_std^2

where pmf/cdf are Binomial(N, q) with N the domain's minimum dataset size.
The first ("impairment") term is the price of rejection; the second is the
familiar subsampled-Gaussian cost. Composition over T steps multiplies
gamma by T, and (alpha, gamma)-RDP converts to (epsilon, delta)-DP via
epsilon = gamma + ln(1/delta)/(alpha - 1), minimized over a grid of orders.

The closed form is proven only for q <= 1/5, target_std >= 4,
floor <= q*N and two alpha inequalities; results outside that regime are
still computed (they reproduce common reporting practice) but are flagged
``regime_valid=False`` rather than refused, unless strict mode is on.

Everything runs in log space: impairment terms at realistic scales sit at
1e-10 and below.
"""

from __future__ import annotations

import dataclasses
import functools
import math

import numpy as np

from .numkit import log_binom_pmf, log_binom_sf

__all__ = [
    "EpsilonReport",
    "RdpLedger",
    "SrgmParams",
    "ValidityError",
    "alpha_valid",
    "best_epsilon",
    "compose",
    "default_alpha_grid",
    "impairment_ratio",
    "rdp_to_dp",
    "sgm_step_rdp",
    "srgm_step_rdp",
]


class ValidityError(ValueError):
    """A Renyi order outside the proven regime was used in strict mode."""


@dataclasses.dataclass(frozen=True)
class SrgmParams:
    """Mechanism parameters for one training step.

    target_std is the noise-to-sensitivity ratio: the controller guarantees
    per-direction std >= target_std * C for clip bound C, so C cancels.
    """

    sampling_rate: float
    target_std: float
    batch_floor: int
    min_dataset_size: int

    def __post_init__(self) -> None:
        if not 0.0 < self.sampling_rate <= 1.0:
            raise ValueError(f"sampling_rate must lie in (0, 1], got {self}")
        if self.target_std <= 0:
            raise ValueError(f"target_std must be positive, got {self}")
        if not 1 <= self.batch_floor <= self.min_dataset_size:
            raise ValueError(
                f"batch_floor must lie in [1, min_dataset_size], got {self}"
            )


def theorem_regime_ok(p: SrgmParams) -> bool:
    """The parameter-level (alpha-independent) conditions of the bound."""
    return (
        p.sampling_rate <= 0.2
        and p.target_std >= 4.0
        and p.batch_floor <= p.sampling_rate * p.min_dataset_size
    )


def _alpha_conditions(alpha: float, q: float, target_std: float) -> bool:
    """The two alpha inequalities, evaluated literally.

    A nonpositive denominator in the second condition is treated as a
    violation (the derivation assumes it positive).
    """
    if alpha <= 1.0:
        return False
    a = math.log1p(1.0 / (q * (alpha - 1.0)))
    s2 = target_std**2
    if alpha > 0.5 * s2 * a - 2.0 * math.log(target_std):
        return False
    num = 0.5 * s2 * a * a - math.log(5.0) - 2.0 * math.log(target_std)
    den = a + math.log(q * alpha) + 1.0 / (2.0 * s2)
    if den <= 0.0:
        return False
    return alpha <= num / den


def alpha_valid(alpha: float, p: SrgmParams) -> bool:
    """Whether the closed-form bound is proven at this Renyi order."""
    return theorem_regime_ok(p) and _alpha_conditions(
        alpha, p.sampling_rate, p.target_std
    )


@functools.lru_cache(maxsize=128)
def log_impairment_term(p: SrgmParams) -> float:
    """log of the rejection impairment q*pmf(floor-1)/(1-cdf(floor-1)).

    -inf (impairment exactly zero) when q = 1, where no batch below the
    dataset size ever occurs.
    """
    if p.sampling_rate == 1.0:
        return -math.inf
    k = p.batch_floor - 1
    n = p.min_dataset_size
    return (
        math.log(p.sampling_rate)
        + log_binom_pmf(k, n, p.sampling_rate)
        - log_binom_sf(k, n, p.sampling_rate)
    )


def impairment_term(p: SrgmParams) -> float:
    return math.exp(log_impairment_term(p))


def _log_main_term(alpha: float, q: float, target_std: float) -> float:
    return math.log(2.0) + 2.0 * math.log(q) + math.log(alpha) - 2.0 * math.log(target_std)


def sgm_step_rdp(alpha: float, q: float, target_std: float) -> float:
    """Impairment-free subsampled-Gaussian step cost 2 q^2 alpha / std^2."""
    if alpha <= 1.0:
        raise ValueError(f"alpha must exceed 1, got {alpha}")
    return 2.0 * q * q * alpha / target_std**2


def srgm_step_rdp(alpha: float, p: SrgmParams, strict: bool = False) -> float:
    """Per-step RDP cost of the rejection-sampled Gaussian mechanism."""
    if alpha <= 1.0:
        raise ValueError(f"alpha must exceed 1, got {alpha}")
    if strict and not alpha_valid(alpha, p):
        raise ValidityError(
            f"alpha={alpha} is outside the proven regime for {p}"
        )
    return impairment_term(p) + sgm_step_rdp(alpha, p.sampling_rate, p.target_std)


def impairment_ratio(p: SrgmParams, alpha: float) -> float:
    """Ratio of the impairment term to the subsampled-Gaussian term.

    Computed in log space so deep-tail ratios do not underflow.
    """
    if alpha <= 1.0:
        raise ValueError(f"alpha must exceed 1, got {alpha}")
    log_imp = log_impairment_term(p)
    if log_imp == -math.inf:
        return 0.0
    return math.exp(
        log_imp - _log_main_term(alpha, p.sampling_rate, p.target_std)
    )


def compose(step_gamma: float, steps: int) -> float:
    """Additive RDP composition of `steps` identical steps."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    return steps * step_gamma


def rdp_to_dp(alpha: float, gamma: float, delta: float) -> float:
    """(alpha, gamma)-RDP implies (gamma + ln(1/delta)/(alpha-1), delta)-DP."""
    if alpha <= 1.0:
        raise ValueError(f"alpha must exceed 1, got {alpha}")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    return gamma + math.log(1.0 / delta) / (alpha - 1.0)


def default_alpha_grid() -> np.ndarray:
    """Dense orders below 2 (where heavily subsampled optima live),
    integers up to 256 above."""
    fine = np.round(np.arange(1.01, 2.0, 0.01), 2)
    coarse = np.arange(2.0, 257.0)
    return np.concatenate([fine, coarse])


@dataclasses.dataclass
class EpsilonReport:
    """Best (epsilon, alpha) over a grid, with the per-step terms at alpha."""

    epsilon: float
    alpha: float
    gamma: float  # composed total at alpha
    impairment_term: float  # per step
    main_term: float  # per step, at alpha
    regime_valid: bool

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def best_epsilon(
    p: SrgmParams,
    steps: int,
    delta: float,
    strict: bool = False,
    grid: np.ndarray | None = None,
) -> EpsilonReport:
    """Minimize the converted epsilon over the alpha grid.

    In strict mode the grid is first filtered to proven orders and an empty
    result raises ValidityError; otherwise the full grid is searched and the
    report's regime_valid flag says whether the chosen order is proven.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    alphas = default_alpha_grid() if grid is None else np.asarray(grid, dtype=float)
    if strict:
        alphas = np.array([a for a in alphas if alpha_valid(float(a), p)])
        if alphas.size == 0:
            raise ValidityError(
                f"no grid order is proven for {p}; the bound requires "
                "sampling_rate <= 1/5, target_std >= 4, "
                "batch_floor <= sampling_rate * min_dataset_size and two "
                "order inequalities"
            )
    imp = impairment_term(p)
    gammas = steps * (
        imp + 2.0 * p.sampling_rate**2 * alphas / p.target_std**2
    )
    eps = gammas + math.log(1.0 / delta) / (alphas - 1.0)
    i = int(np.argmin(eps))
    alpha_star = float(alphas[i])
    return EpsilonReport(
        epsilon=float(eps[i]),
        alpha=alpha_star,
        gamma=float(gammas[i]),
        impairment_term=imp,
        main_term=sgm_step_rdp(alpha_star, p.sampling_rate, p.target_std),
        regime_valid=alpha_valid(alpha_star, p),
    )


class RdpLedger:
    """Accumulated RDP cost over a grid of orders.

    Steps are added one at a time (gamma entries are nondecreasing in the
    step count); entries at unproven orders are tracked but flagged so
    strict queries ignore them.
    """

    def __init__(
        self,
        step_gammas: np.ndarray,
        validity: np.ndarray,
        impairment: float,
        alpha_grid: np.ndarray | None = None,
    ):
        self.alpha_grid = (
            default_alpha_grid() if alpha_grid is None else np.asarray(alpha_grid)
        )
        if step_gammas.shape != self.alpha_grid.shape:
            raise ValueError("per-step gammas must align with the alpha grid")
        self._step_gammas = step_gammas
        self.validity = validity
        self._impairment = impairment
        self.steps_accumulated = 0

    @property
    def gamma_per_alpha(self) -> np.ndarray:
        # count * step rather than a running sum, so accumulating T single
        # steps equals compose(step_gamma, T) exactly.
        return self.steps_accumulated * self._step_gammas

    @classmethod
    def for_srgm(
        cls, p: SrgmParams, alpha_grid: np.ndarray | None = None
    ) -> "RdpLedger":
        grid = default_alpha_grid() if alpha_grid is None else np.asarray(alpha_grid)
        imp = impairment_term(p)
        step = imp + 2.0 * p.sampling_rate**2 * grid / p.target_std**2
        validity = np.array([alpha_valid(float(a), p) for a in grid])
        return cls(step, validity, imp, grid)

    @classmethod
    def for_sgm(
        cls, q: float, target_std: float, alpha_grid: np.ndarray | None = None
    ) -> "RdpLedger":
        """Impairment-free ledger for the gradient-perturbation baseline."""
        grid = default_alpha_grid() if alpha_grid is None else np.asarray(alpha_grid)
        step = 2.0 * q * q * grid / target_std**2
        validity = np.array(
            [
                q <= 0.2
                and target_std >= 4.0
                and _alpha_conditions(float(a), q, target_std)
                for a in grid
            ]
        )
        return cls(step, validity, 0.0, grid)

    def add_step(self, count: int = 1) -> None:
        if count < 1:
            raise ValueError(f"count must be >= 1, got {count}")
        self.steps_accumulated += count

    def epsilon(self, delta: float, strict: bool = False) -> EpsilonReport:
        if self.steps_accumulated < 1:
            raise ValueError("no steps accumulated yet")
        if not 0.0 < delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {delta}")
        mask = self.validity if strict else np.ones_like(self.validity, dtype=bool)
        if strict and not mask.any():
            raise ValidityError("no grid order is proven for this ledger")
        alphas = self.alpha_grid[mask]
        gammas = self.gamma_per_alpha[mask]
        eps = gammas + math.log(1.0 / delta) / (alphas - 1.0)
        i = int(np.argmin(eps))
        alpha_star = float(alphas[i])
        return EpsilonReport(
            epsilon=float(eps[i]),
            alpha=alpha_star,
            gamma=float(gammas[i]),
            impairment_term=self._impairment,
            main_term=float(self._step_gammas[mask][i] - self._impairment),
            regime_valid=bool(self.validity[mask][i]),
        )


def bound_ratio_rows(
    q: float,
    target_std: float,
    alpha: float,
    min_dataset_sizes: np.ndarray,
    floor_fractions: np.ndarray,
) -> list[tuple[int, int, float]]:
    """(min_dataset_size, batch_floor, ratio) rows for contour plotting."""
    rows = []
    for n_bar in min_dataset_sizes:
        for frac in floor_fractions:
            floor = max(1, int(round(frac * q * n_bar)))
            p = SrgmParams(
                sampling_rate=q,
                target_std=target_std,
                batch_floor=floor,
                min_dataset_size=int(n_bar),
            )
            rows.append((int(n_bar), floor, impairment_ratio(p, alpha)))
    return rows
