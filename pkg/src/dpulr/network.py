"""Minimal layered feed-forward network on numpy.

Linear layers with a per-layer activation (gelu / relu / identity), trained
with softmax cross-entropy. Supports the three evaluation modes the rest of
the package needs:

* a noise-free forward pass that records every layer input and
  pre-activation (the source of Jacobians and of the clean loss),
* a noisy forward pass where a perturbation is injected at one layer's
  pre-activation output and propagated forward, and
* exact backpropagation (oracle for the estimator tests and engine for the
  gradient-descent baseline).

The final layer's activation must be the identity; the loss applies the
softmax.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy import special

from .numkit import RngStream

__all__ = [
    "ForwardTrace",
    "LayerSpec",
    "ModelParams",
    "ShapeError",
    "backprop_gradients",
    "forward_clean",
    "forward_noisy",
    "init_params",
    "layer_jacobian",
    "predict_logits",
]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Input dimensions do not match the architecture."""


def _gelu(u: np.ndarray) -> np.ndarray:
    return 0.5 * u * (1.0 + special.erf(u / _SQRT2))


def _gelu_deriv(u: np.ndarray) -> np.ndarray:
    # d/du u*Phi(u) = Phi(u) + u*phi(u), with the exact (erf) Phi.
    phi = _INV_SQRT_2PI * np.exp(-0.5 * u * u)
    return 0.5 * (1.0 + special.erf(u / _SQRT2)) + u * phi


def _relu(u: np.ndarray) -> np.ndarray:
    return np.maximum(u, 0.0)


def _relu_deriv(u: np.ndarray) -> np.ndarray:
    return (u > 0.0).astype(np.float64)


def _identity(u: np.ndarray) -> np.ndarray:
    return u


def _one(u: np.ndarray) -> np.ndarray:
    return np.ones_like(u)


ACTIVATIONS = {
    "gelu": (_gelu, _gelu_deriv),
    "relu": (_relu, _relu_deriv),
    "identity": (_identity, _one),
}


@dataclasses.dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "gelu"

    def __post_init__(self) -> None:
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ValueError(f"layer dims must be positive, got {self}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"unknown activation {self.activation!r}; "
                f"expected one of {sorted(ACTIVATIONS)}"
            )

    @property
    def theta_dim(self) -> int:
        """Flattened parameter count: weights (row-major) then biases."""
        return self.out_dim * self.in_dim + self.out_dim


def validate_architecture(specs: tuple[LayerSpec, ...]) -> None:
    if not specs:
        raise ValueError("architecture must contain at least one layer")
    for a, b in zip(specs, specs[1:]):
        if a.out_dim != b.in_dim:
            raise ValueError(f"layer chain mismatch: {a.out_dim} -> {b.in_dim}")
    if specs[-1].activation != "identity":
        raise ValueError("final layer activation must be identity")


@dataclasses.dataclass
class ModelParams:
    """Per-layer weight matrices (out_dim x in_dim) and bias vectors."""

    specs: tuple[LayerSpec, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        validate_architecture(self.specs)
        if len(self.weights) != len(self.specs) or len(self.biases) != len(self.specs):
            raise ShapeError("weights/biases must match the layer chain")
        for spec, w, b in zip(self.specs, self.weights, self.biases):
            if w.shape != (spec.out_dim, spec.in_dim) or b.shape != (spec.out_dim,):
                raise ShapeError(
                    f"parameter shapes {w.shape}/{b.shape} do not match {spec}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("parameters contain non-finite entries")

    @property
    def n_layers(self) -> int:
        return len(self.specs)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.specs,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )


def init_params(specs: tuple[LayerSpec, ...], rng: RngStream) -> ModelParams:
    """He-style Gaussian init for weights, zero biases."""
    validate_architecture(tuple(specs))
    gen = rng.generator()
    weights, biases = [], []
    for spec in specs:
        std = np.sqrt(2.0 / spec.in_dim)
        weights.append(gen.normal(0.0, std, size=(spec.out_dim, spec.in_dim)))
        biases.append(np.zeros(spec.out_dim))
    return ModelParams(tuple(specs), weights, biases)


@dataclasses.dataclass
class ForwardTrace:
    """Record of one noise-free pass: per-layer inputs and pre-activations."""

    inputs: list[np.ndarray]  # x^l, input to layer l
    preacts: list[np.ndarray]  # v^l = W x^l + b
    logits: np.ndarray
    loss: float
    label: int


def cross_entropy(logits: np.ndarray, label: int | np.ndarray) -> float | np.ndarray:
    """Softmax cross-entropy, log-sum-exp stabilized.

    Accepts a single logits vector with an int label, or a (B, k) matrix
    with a (B,) label array.
    """
    if logits.ndim == 1:
        m = logits.max()
        lse = m + np.log(np.exp(logits - m).sum())
        return float(lse - logits[int(label)])
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    return lse - logits[np.arange(logits.shape[0]), label]


def _check_input(x: np.ndarray, params: ModelParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.specs[0].in_dim,):
        raise ShapeError(
            f"input shape {x.shape} does not match first layer "
            f"(in_dim={params.specs[0].in_dim})"
        )
    return x


def forward_clean(x: np.ndarray, y: int, params: ModelParams) -> ForwardTrace:
    """Noise-free forward pass recording x^l and v^l for every layer."""
    h = _check_input(x, params)
    inputs, preacts = [], []
    for spec, w, b in zip(params.specs, params.weights, params.biases):
        inputs.append(h)
        v = w @ h + b
        preacts.append(v)
        h = ACTIVATIONS[spec.activation][0](v)
    logits = preacts[-1]  # final activation is the identity
    return ForwardTrace(
        inputs=inputs,
        preacts=preacts,
        logits=logits,
        loss=cross_entropy(logits, y),
        label=int(y),
    )


def _propagate_rows(h: np.ndarray, params: ModelParams, from_layer: int) -> np.ndarray:
    """Push (B, d) rows through layers from_layer.. and return logits rows."""
    for spec, w, b in list(
        zip(params.specs, params.weights, params.biases)
    )[from_layer:]:
        h = h @ w.T + b
        if spec.activation != "identity":
            h = ACTIVATIONS[spec.activation][0](h)
    return h


def forward_noisy(
    x: np.ndarray,
    y: int,
    params: ModelParams,
    layer: int,
    z: np.ndarray,
) -> float | np.ndarray:
    """Loss after injecting z at layer `layer`'s pre-activation output.

    The flow below `layer` is the clean pass; at `layer`, activation(v + z)
    replaces activation(v). With z = 0 this reproduces forward_clean's loss
    exactly. z may be one vector (d_v,) returning a float, or a stack
    (K, d_v) of independent draws returning (K,) losses from one shared
    clean prefix.
    """
    if not 0 <= layer < params.n_layers:
        raise ShapeError(f"layer index {layer} out of range")
    h = _check_input(x, params)
    for spec, w, b in list(zip(params.specs, params.weights, params.biases))[:layer]:
        h = ACTIVATIONS[spec.activation][0](w @ h + b)
    v = params.weights[layer] @ h + params.biases[layer]
    return resume_losses(v, y, params, layer, z)


def resume_losses(
    preact: np.ndarray,
    y: int | np.ndarray,
    params: ModelParams,
    layer: int,
    z: np.ndarray,
) -> float | np.ndarray:
    """Losses when noise z is added to a known pre-activation v^layer.

    preact is v^layer for one example; z is (d_v,) or (K, d_v).
    """
    spec = params.specs[layer]
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != spec.out_dim:
        raise ShapeError(
            f"noise dim {z.shape[-1]} does not match layer out_dim {spec.out_dim}"
        )
    single = z.ndim == 1
    h = ACTIVATIONS[spec.activation][0](preact + z)
    if single:
        for nxt, w, b in list(
            zip(params.specs, params.weights, params.biases)
        )[layer + 1 :]:
            h = w @ h + b
            if nxt.activation != "identity":
                h = ACTIVATIONS[nxt.activation][0](h)
        return cross_entropy(h, int(y))
    logits = _propagate_rows(h, params, layer + 1)
    labels = np.full(logits.shape[0], int(y)) if np.ndim(y) == 0 else np.asarray(y)
    return cross_entropy(logits, labels)


def layer_jacobian(trace: ForwardTrace, layer: int) -> np.ndarray:
    """Dense Jacobian of v^layer w.r.t. that layer's flattened parameters.

    Parameter order is weights row-major then biases, so the weight block
    satisfies d v_m / d W_{m,n} = x_n (zeros elsewhere) and the bias block
    is the identity.
    """
    if not 0 <= layer < len(trace.preacts):
        raise ShapeError(f"layer index {layer} out of range")
    x = trace.inputs[layer]
    out, d_in = trace.preacts[layer].shape[0], x.shape[0]
    jac = np.zeros((out, out * d_in + out))
    for m in range(out):
        jac[m, m * d_in : (m + 1) * d_in] = x
        jac[m, out * d_in + m] = 1.0
    return jac


def backprop_gradients(
    x: np.ndarray, y: int, params: ModelParams
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Exact per-layer gradients (dW, db) of the cross-entropy loss."""
    trace = forward_clean(x, y, params)
    probs = np.exp(trace.logits - trace.logits.max())
    probs /= probs.sum()
    delta = probs.copy()
    delta[trace.label] -= 1.0
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * params.n_layers  # type: ignore[list-item]
    for l in range(params.n_layers - 1, -1, -1):
        grads[l] = (np.outer(delta, trace.inputs[l]), delta.copy())
        if l > 0:
            upstream = params.weights[l].T @ delta
            deriv = ACTIVATIONS[params.specs[l - 1].activation][1]
            delta = upstream * deriv(trace.preacts[l - 1])
    return grads


def per_example_gradients(
    X: np.ndarray, Y: np.ndarray, params: ModelParams
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Vectorized backprop over a batch: per-layer (B,out,in) and (B,out)."""
    X = np.asarray(X, dtype=np.float64)
    inputs, preacts = [], []
    h = X
    for spec, w, b in zip(params.specs, params.weights, params.biases):
        inputs.append(h)
        v = h @ w.T + b
        preacts.append(v)
        h = ACTIVATIONS[spec.activation][0](v)
    logits = preacts[-1]
    m = logits.max(axis=1, keepdims=True)
    probs = np.exp(logits - m)
    probs /= probs.sum(axis=1, keepdims=True)
    delta = probs
    delta[np.arange(len(Y)), Y] -= 1.0
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * params.n_layers  # type: ignore[list-item]
    for l in range(params.n_layers - 1, -1, -1):
        grads[l] = (np.einsum("bo,bi->boi", delta, inputs[l]), delta.copy())
        if l > 0:
            upstream = delta @ params.weights[l]
            deriv = ACTIVATIONS[params.specs[l - 1].activation][1]
            delta = upstream * deriv(preacts[l - 1])
    return grads


def batch_forward(
    X: np.ndarray, Y: np.ndarray, params: ModelParams
) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Forward a batch, returning per-layer inputs, pre-activations, losses."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.specs[0].in_dim:
        raise ShapeError(f"batch shape {X.shape} does not match architecture")
    inputs, preacts = [], []
    h = X
    for spec, w, b in zip(params.specs, params.weights, params.biases):
        inputs.append(h)
        v = h @ w.T + b
        preacts.append(v)
        h = ACTIVATIONS[spec.activation][0](v)
    losses = cross_entropy(preacts[-1], np.asarray(Y))
    return inputs, preacts, losses


def predict_logits(X: np.ndarray, params: ModelParams) -> np.ndarray:
    """Logits for a (B, in_dim) batch."""
    X = np.asarray(X, dtype=np.float64)
    return _propagate_rows(X, params, 0)


def param_noise_to_preact(z: np.ndarray, x: np.ndarray, spec: LayerSpec) -> np.ndarray:
    """Pre-activation offset equivalent to parameter-space noise z.

    Adding z to the layer's flattened parameters shifts v = Wx + b by
    (dW) x + db, which is exactly the layer Jacobian applied to z. Accepts
    z of shape (theta_dim,) or (K, theta_dim).
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zz = z[None, :] if single else z
    n_w = spec.out_dim * spec.in_dim
    dw = zz[:, :n_w].reshape(-1, spec.out_dim, spec.in_dim)
    offset = dw @ x + zz[:, n_w:]
    return offset[0] if single else offset
