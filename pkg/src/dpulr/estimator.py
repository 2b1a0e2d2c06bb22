"""Likelihood-ratio gradient estimation.

The gradient proxy for one example and one layer is

    ghat = (1/sigma^2) J^T (z * L)

where J is the Jacobian of the layer's pre-activation output with respect
to that layer's parameters, z is the injected Gaussian noise and L is the
loss of the noisy forward pass. One example's estimate averages K
independent proxies and is then clipped to l2 norm at most C.

For a linear layer the K-average factors: with
wbar = (1/(sigma^2 K)) sum_k z_k L_k the averaged proxy equals
[vec(wbar x^T), wbar] for layer input x, so neither the dense Jacobian nor
per-repeat gradients are ever materialized on the batch path. The dense
``lr_proxy`` form is kept as the reference surface; both paths agree to
rounding.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import network
from .network import ACTIVATIONS, ForwardTrace, ModelParams, ShapeError
from .numkit import RngStream

__all__ = [
    "ExampleGradient",
    "batch_layer_estimate",
    "empirical_proxy_moments",
    "estimate_example_gradient",
    "lr_proxy",
]

# Rows propagated per chunk on vectorized paths (examples x repeats).
_CHUNK_ROWS = 200_000


@dataclasses.dataclass
class ExampleGradient:
    """Clipped, K-averaged gradient estimate for one example and layer."""

    layer: int
    values: np.ndarray
    pre_clip_norm: float


def lr_proxy(
    trace: ForwardTrace,
    jac: np.ndarray,
    z: np.ndarray,
    noisy_loss: float,
    sigma: float,
) -> np.ndarray:
    """Single-draw gradient proxy (1/sigma^2) J^T (z * L)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    z = np.asarray(z, dtype=np.float64)
    if jac.ndim != 2 or z.shape != (jac.shape[0],):
        raise ShapeError(
            f"jacobian {jac.shape} and noise {z.shape} are incompatible"
        )
    return (jac.T @ z) * (noisy_loss / sigma**2)


def _clip(values: np.ndarray, clip_bound: float) -> tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(values))
    if norm > clip_bound:
        values = values * (clip_bound / norm)
    return values, norm


def estimate_example_gradient(
    example: tuple[np.ndarray, int],
    params: ModelParams,
    layer: int,
    sigma: float,
    repeats: int,
    clip_bound: float,
    rng: RngStream,
    inject: str = "preact",
) -> ExampleGradient:
    """Average K fresh-noise proxies for one example, then clip.

    ``inject="preact"`` perturbs the layer's pre-activation output (the
    standard mode); ``inject="params"`` perturbs the layer's parameters
    directly, which makes the Jacobian the identity.
    """
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    if clip_bound <= 0:
        raise ValueError(f"clip_bound must be positive, got {clip_bound}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    x, y = example
    trace = network.forward_clean(x, y, params)
    spec = params.specs[layer]
    gen = rng.generator()
    if inject == "preact":
        z = gen.normal(0.0, sigma, size=(repeats, spec.out_dim))
        losses = network.resume_losses(trace.preacts[layer], y, params, layer, z)
        wbar = (z.T @ losses) / (sigma**2 * repeats)
        x_l = trace.inputs[layer]
        values = np.concatenate([np.outer(wbar, x_l).ravel(), wbar])
    elif inject == "params":
        z = gen.normal(0.0, sigma, size=(repeats, spec.theta_dim))
        offsets = network.param_noise_to_preact(z, trace.inputs[layer], spec)
        losses = network.resume_losses(
            trace.preacts[layer], y, params, layer, offsets
        )
        values = (z.T @ losses) / (sigma**2 * repeats)
    else:
        raise ValueError(f"unknown inject mode {inject!r}")
    values, pre_clip_norm = _clip(values, clip_bound)
    return ExampleGradient(layer=layer, values=values, pre_clip_norm=pre_clip_norm)


def empirical_proxy_moments(
    example: tuple[np.ndarray, int],
    params: ModelParams,
    layer: int,
    sigma: float,
    samples: int,
    rng: RngStream,
    inject: str = "preact",
) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and covariance of unclipped single-draw proxies.

    Test instrument for the proxy moment laws; materializes a
    theta_dim x theta_dim covariance, so intended for small layers.
    """
    if samples < 1_000:
        raise ValueError(f"need at least 1000 samples, got {samples}")
    x, y = example
    trace = network.forward_clean(x, y, params)
    spec = params.specs[layer]
    jac = network.layer_jacobian(trace, layer)
    d = spec.theta_dim
    total = np.zeros(d)
    total_outer = np.zeros((d, d))
    gen = rng.generator()
    chunk = max(1, _CHUNK_ROWS // max(1, spec.out_dim))
    done = 0
    while done < samples:
        c = min(chunk, samples - done)
        if inject == "preact":
            z = gen.normal(0.0, sigma, size=(c, spec.out_dim))
            losses = network.resume_losses(trace.preacts[layer], y, params, layer, z)
            proxies = (z * (losses / sigma**2)[:, None]) @ jac
        elif inject == "params":
            z = gen.normal(0.0, sigma, size=(c, d))
            offsets = network.param_noise_to_preact(z, trace.inputs[layer], spec)
            losses = network.resume_losses(
                trace.preacts[layer], y, params, layer, offsets
            )
            proxies = z * (losses / sigma**2)[:, None]
        else:
            raise ValueError(f"unknown inject mode {inject!r}")
        total += proxies.sum(axis=0)
        total_outer += proxies.T @ proxies
        done += c
    mean = total / samples
    cov = (total_outer - samples * np.outer(mean, mean)) / (samples - 1)
    return mean, cov


@dataclasses.dataclass
class BatchLayerEstimate:
    """Clipped per-example estimates for one layer, summed over a batch."""

    grad_weight: np.ndarray  # (out, in) sum of clipped per-example gradients
    grad_bias: np.ndarray  # (out,)
    pre_clip_norms: np.ndarray  # (B,)


def batch_layer_estimate(
    xs: np.ndarray,
    preacts: np.ndarray,
    labels: np.ndarray,
    params: ModelParams,
    layer: int,
    sigma: float,
    repeats: int,
    clip_bound: float,
    layer_stream: RngStream,
    stream_labels: np.ndarray,
    inject: str = "preact",
    threads: int = 1,
) -> BatchLayerEstimate:
    """K-averaged, clipped estimates for every example in a batch.

    xs/preacts are the layer's clean inputs and pre-activations for the
    batch (rows aligned with labels); each example's noise comes from
    ``layer_stream.child(stream_labels[i])`` so results are byte-identical
    for any chunking or thread count. Per-example gradients are formed and
    summed in factored form (outer products against the clean layer input),
    never as dense theta_dim vectors.
    """
    spec = params.specs[layer]
    b = xs.shape[0]
    out = spec.out_dim
    if inject == "params":
        # Parameter-space noise: the estimate lives directly in theta space.
        gw = np.zeros((out, spec.in_dim))
        gb = np.zeros(out)
        norms = np.zeros(b)
        for i in range(b):
            z = (
                layer_stream.child(int(stream_labels[i]))
                .generator()
                .normal(0.0, sigma, size=(repeats, spec.theta_dim))
            )
            offsets = network.param_noise_to_preact(z, xs[i], spec)
            losses = network.resume_losses(
                preacts[i], int(labels[i]), params, layer, offsets
            )
            vals = (z.T @ losses) / (sigma**2 * repeats)
            vals, norms[i] = _clip(vals, clip_bound)
            gw += vals[: out * spec.in_dim].reshape(out, spec.in_dim)
            gb += vals[out * spec.in_dim :]
        return BatchLayerEstimate(gw, gb, norms)

    act = ACTIVATIONS[spec.activation][0]
    wbar = np.empty((b, out))

    def fill_chunk(lo: int, hi: int) -> None:
        z = np.stack(
            [
                layer_stream.child(int(stream_labels[i]))
                .generator()
                .normal(0.0, sigma, size=(repeats, out))
                for i in range(lo, hi)
            ]
        )
        h = act(preacts[lo:hi, None, :] + z)
        logits = network._propagate_rows(h.reshape(-1, out), params, layer + 1)
        losses = network.cross_entropy(
            logits, np.repeat(labels[lo:hi], repeats)
        ).reshape(hi - lo, repeats)
        wbar[lo:hi] = np.einsum("bko,bk->bo", z, losses) / (sigma**2 * repeats)

    chunk = max(1, _CHUNK_ROWS // max(1, repeats))
    bounds = [(lo, min(lo + chunk, b)) for lo in range(0, b, chunk)]
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda lh: fill_chunk(*lh), bounds))
    else:
        for lo, hi in bounds:
            fill_chunk(lo, hi)
    # ||[vec(wbar x^T), wbar]|| = ||wbar|| sqrt(||x||^2 + 1)
    norms = np.linalg.norm(wbar, axis=1) * np.sqrt(
        (xs**2).sum(axis=1) + 1.0
    )
    scales = np.minimum(1.0, clip_bound / np.maximum(norms, 1e-300))
    scaled = wbar * scales[:, None]
    return BatchLayerEstimate(
        grad_weight=scaled.T @ xs,
        grad_bias=scaled.sum(axis=0),
        pre_clip_norms=norms,
    )
