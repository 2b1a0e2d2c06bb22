"""Training loops: forward-noise estimation (DP-ULR) and the DP-SGD baseline.

One DP-ULR step:

1. draw a Poisson batch, rejecting draws below the batch floor;
2. one clean forward pass per batch example (shared between the controller
   and the estimator);
3. per layer: sum the standard covariances, pick sigma (or a remediation
   plan), average K noisy-forward proxies per example, clip, sum over the
   batch, add any remediation noise;
4. descend with the summed gradient scaled by the fixed batch floor, and
   accumulate one accountant step.

The baseline clips exact per-example backprop gradients and adds isotropic
Gaussian noise to their sum; its accountant drops the rejection impairment
term.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from pathlib import Path

import numpy as np

from . import controller as ctl
from . import network
from .accountant import RdpLedger, SrgmParams
from .config import ConfigError, RunConfig
from .data import Dataset
from .estimator import batch_layer_estimate
from .numkit import RngStream, gaussian_matrix
from .sampler import BatchDraw, PermutationSampler, draw_batch

__all__ = [
    "StepRecord",
    "accuracy",
    "emit_metrics",
    "load_params",
    "read_metrics",
    "save_params",
    "train",
    "train_dp_sgd",
    "train_dp_ulr",
]

# Stream-path domains so no two uses ever share a (seed, path).
_DOM_INIT = 1
_DOM_SAMPLER = 2
_DOM_NOISE = 3
_DOM_REMEDY = 4
_DOM_BASELINE_NOISE = 5

METRICS_HEADER = (
    "step,epoch,batch_size,train_loss,train_acc,valid_acc,epsilon,"
    "alpha_star,min_eig_min,sigma_max,remediated_layers"
)


@dataclasses.dataclass
class StepRecord:
    """Everything observable about one optimizer step."""

    step: int
    epoch: int
    batch_size: int
    train_loss: float
    reports: list[ctl.ControllerReport]
    gamma_per_alpha: np.ndarray
    epsilon: float
    alpha_star: float
    regime_valid: bool
    train_acc: float | None = None
    valid_acc: float | None = None

    @property
    def is_eval_point(self) -> bool:
        return self.train_acc is not None


class _Sgd:
    def step(self, params: network.ModelParams, grads, lr: float) -> None:
        for l, (gw, gb) in enumerate(grads):
            params.weights[l] -= lr * gw
            params.biases[l] -= lr * gb


class _Adam:
    def __init__(self, params: network.ModelParams):
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8
        self.t = 0
        self.m = [
            (np.zeros_like(w), np.zeros_like(b))
            for w, b in zip(params.weights, params.biases)
        ]
        self.v = [
            (np.zeros_like(w), np.zeros_like(b))
            for w, b in zip(params.weights, params.biases)
        ]

    def step(self, params: network.ModelParams, grads, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for l, (gw, gb) in enumerate(grads):
            for slot, g, target in ((0, gw, params.weights[l]), (1, gb, params.biases[l])):
                m = self.m[l][slot]
                v = self.v[l][slot]
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                target -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _make_optimizer(name: str, params: network.ModelParams):
    return _Adam(params) if name == "adam" else _Sgd()


def schedule_lr(base: float, decay: float, interval_epochs: int, epoch: int) -> float:
    """Learning rate for an epoch: multiplied by decay exactly once per
    completed interval (iterated product, not pow, so the per-interval
    ratio is exact)."""
    lr = base
    for _ in range(epoch // interval_epochs):
        lr *= decay
    return lr


def accuracy(params: network.ModelParams, dataset: Dataset) -> float:
    hits = 0
    for lo in range(0, dataset.n, 4096):
        logits = network.predict_logits(dataset.inputs[lo : lo + 4096], params)
        hits += int((logits.argmax(axis=1) == dataset.labels[lo : lo + 4096]).sum())
    return hits / dataset.n


def _check_data(config: RunConfig, train_data: Dataset) -> None:
    if train_data.n < config.privacy.min_dataset_size:
        raise ConfigError(
            f"dataset size {train_data.n} is below the configured privacy "
            f"domain minimum {config.privacy.min_dataset_size}"
        )
    if config.architecture[0].in_dim != train_data.dim:
        raise ConfigError(
            f"first layer expects {config.architecture[0].in_dim} features, "
            f"dataset has {train_data.dim}"
        )
    if config.architecture[-1].out_dim != train_data.num_classes:
        raise ConfigError(
            f"final layer emits {config.architecture[-1].out_dim} logits, "
            f"dataset has {train_data.num_classes} classes"
        )


def _split_if_needed(
    config: RunConfig, data: Dataset, valid: Dataset | None
) -> tuple[Dataset, Dataset]:
    if valid is not None:
        return data, valid
    return data.split(0.2, config.seed)


def _params_mode_decision(
    losses: np.ndarray, repeats: int, clip_bound: float, target_std: float
) -> ctl.LayerNoiseDecision:
    """Controller decision when noise is added to parameters directly.

    The Jacobian is the identity, so the covariance sum is (sum L0^2) I:
    always full rank unless every loss is zero.
    """
    s = float((losses**2).sum())
    floor = target_std**2 * clip_bound**2
    if s > 0.0:
        return ctl.LayerNoiseDecision(
            sigma=float(np.sqrt(s / (repeats * floor))),
            min_eig=s,
            remediated=False,
            plan=None,
        )
    return ctl.LayerNoiseDecision(
        sigma=ctl.FALLBACK_SIGMA, min_eig=0.0, remediated=True, plan=None
    )


def train_dp_ulr(
    config: RunConfig,
    data: Dataset,
    valid: Dataset | None = None,
    threads: int = 1,
) -> tuple[network.ModelParams, list[StepRecord]]:
    """Run the forward-noise training loop.

    Returns the final parameters and one record per optimizer step; the last
    record of each epoch carries train/valid accuracy.
    """
    train_data, valid_data = _split_if_needed(config, data, valid)
    _check_data(config, train_data)
    p = config.privacy
    root = RngStream(config.seed)
    params = network.init_params(config.architecture, root.child(_DOM_INIT))
    optimizer = _make_optimizer(config.optimizer.name, params)
    ledger = RdpLedger.for_srgm(
        SrgmParams(
            sampling_rate=p.sampling_rate,
            target_std=p.target_std,
            batch_floor=p.batch_floor,
            min_dataset_size=p.min_dataset_size,
        )
    )

    perm_sampler = None
    if config.sampling == "permutation":
        batch_size = max(1, int(round(p.sampling_rate * train_data.n)))
        perm_sampler = PermutationSampler(
            train_data.n, batch_size, root.child(_DOM_SAMPLER)
        )
        steps_per_epoch = train_data.n // batch_size
    else:
        steps_per_epoch = math.ceil(1.0 / p.sampling_rate)

    records: list[StepRecord] = []
    t = 0
    for epoch in range(config.epochs):
        lr = schedule_lr(
            config.optimizer.learning_rate,
            config.optimizer.decay_factor,
            config.optimizer.decay_interval_epochs,
            epoch,
        )
        epoch_batches = (
            perm_sampler.epoch_batches(epoch) if perm_sampler is not None else None
        )
        for s in range(steps_per_epoch):
            if epoch_batches is not None:
                batch = epoch_batches[s]
            else:
                batch = draw_batch(
                    train_data.n,
                    p.sampling_rate,
                    p.batch_floor,
                    root.child(_DOM_SAMPLER, t),
                )
            x_batch = train_data.inputs[batch.indices]
            y_batch = train_data.labels[batch.indices]
            inputs, preacts, losses = network.batch_forward(x_batch, y_batch, params)

            grads = []
            reports = []
            for l, spec in enumerate(params.specs):
                if config.inject == "params":
                    decision = _params_mode_decision(
                        losses, p.repeats, p.clip_bound, p.target_std
                    )
                else:
                    block = ctl.linear_block_covariance_sum(inputs[l], losses)
                    decision = ctl.decide_layer_noise(
                        block, p.repeats, p.clip_bound, p.target_std
                    )
                estimate = batch_layer_estimate(
                    inputs[l],
                    preacts[l],
                    y_batch,
                    params,
                    l,
                    decision.sigma,
                    p.repeats,
                    p.clip_bound,
                    root.child(_DOM_NOISE, t, l),
                    batch.indices,
                    inject=config.inject,
                    threads=threads,
                )
                gw, gb = estimate.grad_weight, estimate.grad_bias
                extra_var = np.array([])
                if decision.remediated:
                    remedy_rng = root.child(_DOM_REMEDY, t, l)
                    if config.inject == "params":
                        # Isotropic fallback directly in parameter space.
                        std = p.target_std * p.clip_bound
                        gw = gw + gaussian_matrix(gw.shape, std, remedy_rng.child(0))
                        gb = gb + gaussian_matrix(gb.shape, std, remedy_rng.child(1))
                        extra_var = np.full(spec.theta_dim, std**2)
                    else:
                        ew, eb = ctl.block_remediation_noise(
                            decision.plan, spec.out_dim, remedy_rng
                        )
                        gw = gw + ew
                        gb = gb + eb
                        extra_var = decision.plan.variances
                grads.append((gw / p.batch_floor, gb / p.batch_floor))
                reports.append(
                    ctl.ControllerReport(
                        layer=l,
                        min_eig=decision.min_eig,
                        sigma=decision.sigma,
                        remediated=decision.remediated,
                        extra_noise_variances=extra_var,
                    )
                )
            optimizer.step(params, grads, lr)

            ledger.add_step()
            eps = ledger.epsilon(p.delta)
            records.append(
                StepRecord(
                    step=t,
                    epoch=epoch,
                    batch_size=len(batch),
                    train_loss=float(losses.mean()),
                    reports=reports,
                    gamma_per_alpha=ledger.gamma_per_alpha.copy(),
                    epsilon=eps.epsilon,
                    alpha_star=eps.alpha,
                    regime_valid=eps.regime_valid,
                )
            )
            t += 1
        records[-1].train_acc = accuracy(params, train_data)
        records[-1].valid_acc = accuracy(params, valid_data)
    return params, records


def train_dp_sgd(
    config: RunConfig,
    data: Dataset,
    valid: Dataset | None = None,
    threads: int = 1,
) -> tuple[network.ModelParams, list[StepRecord]]:
    """Per-example clipped backprop with isotropic output noise."""
    del threads  # batched backprop is already vectorized
    train_data, valid_data = _split_if_needed(config, data, valid)
    _check_data(config, train_data)
    p = config.privacy
    root = RngStream(config.seed)
    params = network.init_params(config.architecture, root.child(_DOM_INIT))
    optimizer = _make_optimizer(config.optimizer.name, params)
    ledger = RdpLedger.for_sgm(p.sampling_rate, p.target_std)
    expected_batch = p.sampling_rate * train_data.n
    noise_std = p.target_std * p.clip_bound
    steps_per_epoch = math.ceil(1.0 / p.sampling_rate)

    records: list[StepRecord] = []
    t = 0
    for epoch in range(config.epochs):
        lr = schedule_lr(
            config.optimizer.learning_rate,
            config.optimizer.decay_factor,
            config.optimizer.decay_interval_epochs,
            epoch,
        )
        for _ in range(steps_per_epoch):
            gen = root.child(_DOM_SAMPLER, t).generator()
            mask = gen.random(train_data.n) < p.sampling_rate
            idx = np.flatnonzero(mask)
            if idx.size:
                x_batch = train_data.inputs[idx]
                y_batch = train_data.labels[idx]
                per_ex = network.per_example_gradients(x_batch, y_batch, params)
                sq = np.zeros(idx.size)
                for gw, gb in per_ex:
                    sq += (gw**2).sum(axis=(1, 2)) + (gb**2).sum(axis=1)
                norms = np.sqrt(sq)
                scales = np.minimum(1.0, p.clip_bound / np.maximum(norms, 1e-300))
                _, _, losses = network.batch_forward(x_batch, y_batch, params)
                train_loss = float(losses.mean())
            else:
                per_ex = [
                    (np.zeros((0,) + w.shape), np.zeros((0,) + b.shape))
                    for w, b in zip(params.weights, params.biases)
                ]
                scales = np.zeros(0)
                train_loss = float("nan")
            grads = []
            for l, (gw, gb) in enumerate(per_ex):
                noise_rng = root.child(_DOM_BASELINE_NOISE, t, l)
                sum_w = np.einsum("b,boi->oi", scales, gw) if scales.size else np.zeros_like(params.weights[l])
                sum_b = scales @ gb if scales.size else np.zeros_like(params.biases[l])
                sum_w = sum_w + gaussian_matrix(sum_w.shape, noise_std, noise_rng.child(0))
                sum_b = sum_b + gaussian_matrix(sum_b.shape, noise_std, noise_rng.child(1))
                grads.append((sum_w / expected_batch, sum_b / expected_batch))
            optimizer.step(params, grads, lr)

            ledger.add_step()
            eps = ledger.epsilon(p.delta)
            records.append(
                StepRecord(
                    step=t,
                    epoch=epoch,
                    batch_size=int(idx.size),
                    train_loss=train_loss,
                    reports=[],
                    gamma_per_alpha=ledger.gamma_per_alpha.copy(),
                    epsilon=eps.epsilon,
                    alpha_star=eps.alpha,
                    regime_valid=eps.regime_valid,
                )
            )
            t += 1
        records[-1].train_acc = accuracy(params, train_data)
        records[-1].valid_acc = accuracy(params, valid_data)
    return params, records


def train(
    config: RunConfig,
    data: Dataset,
    valid: Dataset | None = None,
    threads: int = 1,
) -> tuple[network.ModelParams, list[StepRecord]]:
    """Dispatch on config.algorithm."""
    fn = train_dp_ulr if config.algorithm == "dp-ulr" else train_dp_sgd
    return fn(config, data, valid=valid, threads=threads)


def _fmt(value: float | int | None) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_metrics(records: list[StepRecord], path: str | Path) -> None:
    """Write one CSV row per record (UTF-8, LF line endings)."""
    lines = [METRICS_HEADER]
    for r in records:
        if r.reports:
            min_eig_min = min(rep.min_eig for rep in r.reports)
            sigma_max = max(rep.sigma for rep in r.reports)
            remediated = sum(rep.remediated for rep in r.reports)
        else:
            min_eig_min, sigma_max, remediated = None, None, 0
        lines.append(
            ",".join(
                [
                    str(r.step),
                    str(r.epoch),
                    str(r.batch_size),
                    _fmt(r.train_loss),
                    _fmt(r.train_acc),
                    _fmt(r.valid_acc),
                    _fmt(r.epsilon),
                    _fmt(r.alpha_star),
                    _fmt(min_eig_min),
                    _fmt(sigma_max),
                    str(remediated),
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


@dataclasses.dataclass
class MetricsRow:
    step: int
    epoch: int
    batch_size: int
    train_loss: float
    train_acc: float | None
    valid_acc: float | None
    epsilon: float
    alpha_star: float
    min_eig_min: float | None
    sigma_max: float | None
    remediated_layers: int


def read_metrics(path: str | Path) -> list[MetricsRow]:
    """Parse a metrics CSV back into rows (inverse of emit_metrics)."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.strip().split("\n")
    if lines[0] != METRICS_HEADER:
        raise ValueError(f"unexpected metrics header: {lines[0]!r}")
    rows = []
    for line in lines[1:]:
        f = line.split(",")
        opt = lambda s: None if s == "" else float(s)
        rows.append(
            MetricsRow(
                step=int(f[0]),
                epoch=int(f[1]),
                batch_size=int(f[2]),
                train_loss=float(f[3]),
                train_acc=opt(f[4]),
                valid_acc=opt(f[5]),
                epsilon=float(f[6]),
                alpha_star=float(f[7]),
                min_eig_min=opt(f[8]),
                sigma_max=opt(f[9]),
                remediated_layers=int(f[10]),
            )
        )
    return rows


def emit_controller_csv(records: list[StepRecord], path: str | Path) -> None:
    """Per-step controller rows: step,layer,min_eig,sigma,remediated."""
    lines = ["step,layer,min_eig,sigma,remediated"]
    for r in records:
        for rep in r.reports:
            lines.append(
                f"{r.step},{rep.layer},{_fmt(rep.min_eig)},{_fmt(rep.sigma)},"
                f"{int(rep.remediated)}"
            )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


_PARAMS_MAGIC = b"DPULRPR1"


def save_params(params: network.ModelParams, path: str | Path) -> None:
    """Binary parameter dump: magic, layer-shape header, then raw float64."""
    blob = bytearray(_PARAMS_MAGIC)
    blob += struct.pack("<I", params.n_layers)
    for spec in params.specs:
        name = spec.activation.encode()
        blob += struct.pack("<IIB", spec.in_dim, spec.out_dim, len(name)) + name
    for w, b in zip(params.weights, params.biases):
        blob += np.ascontiguousarray(w, dtype="<f8").tobytes()
        blob += np.ascontiguousarray(b, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_params(path: str | Path) -> network.ModelParams:
    raw = Path(path).read_bytes()
    if raw[:8] != _PARAMS_MAGIC:
        raise ValueError(f"{path}: not a parameter dump (bad magic {raw[:8]!r})")
    off = 8
    (n_layers,) = struct.unpack_from("<I", raw, off)
    off += 4
    specs = []
    for _ in range(n_layers):
        in_dim, out_dim, name_len = struct.unpack_from("<IIB", raw, off)
        off += 9
        name = raw[off : off + name_len].decode()
        off += name_len
        specs.append(network.LayerSpec(in_dim, out_dim, name))
    weights, biases = [], []
    for spec in specs:
        n_w = spec.out_dim * spec.in_dim
        w = np.frombuffer(raw, dtype="<f8", count=n_w, offset=off).reshape(
            spec.out_dim, spec.in_dim
        )
        off += 8 * n_w
        b = np.frombuffer(raw, dtype="<f8", count=spec.out_dim, offset=off)
        off += 8 * spec.out_dim
        weights.append(w.copy())
        biases.append(b.copy())
    return network.ModelParams(tuple(specs), weights, biases)
