"""Monte-Carlo self-checks of the gradient estimator's moment laws.

Used by the verify-gradient CLI subcommand: on a small fixed architecture,
compare the empirical proxy mean against exact backprop (the mean law) and
the empirical proxy covariance against L0^2/sigma^2 J^T J (the variance
law), reporting deviations per layer.
"""

from __future__ import annotations

import numpy as np

from . import network
from .estimator import empirical_proxy_moments
from .network import LayerSpec
from .numkit import RngStream

__all__ = ["gradient_diagnostics"]

_SPECS = (
    LayerSpec(2, 4, "gelu"),
    LayerSpec(4, 3, "identity"),
)


def _flat(gw: np.ndarray, gb: np.ndarray) -> np.ndarray:
    return np.concatenate([gw.ravel(), gb])


def gradient_diagnostics(seed: int, sigma: float, samples: int) -> dict:
    """Per-layer deviations of the MC proxy moments from their laws."""
    root = RngStream(seed)
    params = network.init_params(_SPECS, root.child(0))
    x = root.child(1).generator().uniform(0.0, 1.0, _SPECS[0].in_dim)
    y = 1
    trace = network.forward_clean(x, y, params)
    backprop = network.backprop_gradients(x, y, params)
    layers = []
    for layer in range(params.n_layers):
        mean, cov = empirical_proxy_moments(
            (x, y), params, layer, sigma, samples, root.child(2, layer)
        )
        target = _flat(*backprop[layer])
        se = np.sqrt(np.maximum(np.diag(cov), 1e-300) / samples)
        jac = network.layer_jacobian(trace, layer)
        law = (trace.loss**2 / sigma**2) * (jac.T @ jac)
        layers.append(
            {
                "layer": layer,
                "mean_l2_deviation": float(np.linalg.norm(mean - target)),
                "mean_rel_deviation": float(
                    np.linalg.norm(mean - target) / max(np.linalg.norm(target), 1e-300)
                ),
                "max_mean_deviation_se_units": float(
                    np.max(np.abs(mean - target) / se)
                ),
                "covariance_frobenius_rel_error": float(
                    np.linalg.norm(cov - law) / np.linalg.norm(law)
                ),
            }
        )
    return {
        "seed": seed,
        "sigma": sigma,
        "samples": samples,
        "clean_loss": trace.loss,
        "layers": layers,
    }
