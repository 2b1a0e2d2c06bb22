"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with -s to see them live).

Checks 2 and 7 assert magnitude bounds that exact evaluation shows are
violated at the pinned parameter grids; they fail by design with the
computed values in the assertion message rather than with loosened
tolerances. Checks 8 and 10 need the MNIST IDX files and skip, with an
explicit reason, when the files are absent.
"""

import dataclasses
import math
from fractions import Fraction

import numpy as np
import pytest

from dpulr import network
from dpulr.accountant import SrgmParams, best_epsilon, impairment_ratio, impairment_term, sgm_step_rdp
from dpulr.config import OptimizerSpec, PrivacySpec, RunConfig
from dpulr.controller import (
    block_remediation_noise,
    decide_layer_noise,
    linear_block_covariance_sum,
)
from dpulr.data import load_mnist_idx
from dpulr.estimator import empirical_proxy_moments
from dpulr.network import (
    LayerSpec,
    ModelParams,
    backprop_gradients,
    forward_clean,
    init_params,
    layer_jacobian,
)
from dpulr.numkit import RngStream
from dpulr.sampler import draw_batch
from dpulr.training import emit_metrics, train_dp_ulr
from conftest import mnist_dir, needs_mnist
from oracles import (
    exact_binom_sf,
    exact_srgm_terms,
    exact_truncated_batch_pmf,
    sgm_reference_epsilon,
)


def report(number: int, passed: bool, detail: str) -> None:
    print(f"ACCEPTANCE {number} {'PASS' if passed else 'FAIL'}: {detail}")


TINY_SPECS = (LayerSpec(2, 4, "gelu"), LayerSpec(4, 3, "identity"))


def tiny_setup(seed: int = 7):
    params = init_params(TINY_SPECS, RngStream(seed, (900,)))
    gen = RngStream(seed, (901,)).generator()
    x = gen.uniform(0.0, 1.0, 2)
    y = int(gen.integers(0, 3))
    return params, x, y


def test_01_accountant_magnitude_claim():
    """Impairment < 1e-10 and main term > 1e-6 at the reference point,
    cross-checked against an exact big-rational oracle to 1e-10 relative."""
    p = SrgmParams(sampling_rate=0.01, target_std=4.0, batch_floor=50,
                   min_dataset_size=10_000)
    alpha = 1.1
    imp = impairment_term(p)
    main = sgm_step_rdp(alpha, p.sampling_rate, p.target_std)
    imp_exact, main_exact = exact_srgm_terms(
        Fraction(1, 100), Fraction(4), 50, 10_000, Fraction(11, 10)
    )
    ok = (
        imp < 1e-10
        and main > 1e-6
        and math.isclose(imp, float(imp_exact), rel_tol=1e-10)
        and math.isclose(main, float(main_exact), rel_tol=1e-10)
    )
    report(1, ok, f"impairment={imp:.4e} (<1e-10), main={main:.4e} (>1e-6), "
                  f"exact oracle agreement to 1e-10")
    assert imp < 1e-10
    assert main > 1e-6
    assert imp == pytest.approx(float(imp_exact), rel=1e-10)
    assert main == pytest.approx(float(main_exact), rel=1e-10)


def test_02_bound_ratio_grid():
    """Impairment/subsampling ratio < 1e-3 over the pinned grid, and
    monotone shrinking in the dataset size."""
    alpha, target_std = 1.1, 4.0
    sizes = [1_000, 3_162, 10_000, 31_623, 100_000]
    fracs = [0.5, 0.65, 0.8, 0.95]
    rates = [0.005, 0.01, 0.05]
    violations = []
    for q in rates:
        for frac in fracs:
            ratios = []
            for n_bar in sizes:
                floor = max(1, min(int(round(frac * q * n_bar)), int(q * n_bar)))
                p = SrgmParams(q, target_std, floor, n_bar)
                ratios.append(impairment_ratio(p, alpha))
            # monotone part: shrinks as the dataset size grows
            assert all(a >= b for a, b in zip(ratios, ratios[1:])), (
                f"ratio not monotone in dataset size at q={q}, frac={frac}: {ratios}"
            )
            for n_bar, ratio in zip(sizes, ratios):
                if ratio >= 1e-3:
                    violations.append((q, frac, n_bar, ratio))
    ok = not violations
    worst = max(violations, key=lambda v: v[3]) if violations else None
    report(2, ok, "all grid ratios < 1e-3" if ok else
           f"{len(violations)}/{len(rates) * len(fracs) * len(sizes)} grid points "
           f"violate the 1e-3 bound; worst: ratio={worst[3]:.3e} at "
           f"q={worst[0]}, floor={worst[1]:.2f}*qN, N={worst[2]}")
    assert not violations, (
        f"impairment/subsampling ratio exceeds 1e-3 at {len(violations)} of "
        f"{len(rates) * len(fracs) * len(sizes)} grid points (exact evaluation "
        f"of the closed form); worst offender q={worst[0]}, "
        f"floor={worst[1]:.2f}*qN, N={worst[2]}: ratio={worst[3]:.3e}"
    )


def test_03_proxy_unbiasedness():
    """MC proxy mean within 3 standard errors of backprop per coordinate at
    sigma=1e-3; deviation shrinks as sigma decreases."""
    params, x, y = tiny_setup()
    trace = forward_clean(x, y, params)
    bp = backprop_gradients(x, y, params)
    samples = 100_000

    # per-coordinate check with raw proxies, as stated
    worst_se_units = 0.0
    for layer in range(2):
        mean, cov = empirical_proxy_moments(
            (x, y), params, layer, 1e-3, samples, RngStream(6, (910, layer))
        )
        target = np.concatenate([bp[layer][0].ravel(), bp[layer][1]])
        se = np.sqrt(np.diag(cov) / samples)
        units = np.abs(mean - target) / se
        worst_se_units = max(worst_se_units, float(units.max()))
        assert np.all(units <= 3.0)

    # shrink check: the baseline-subtracted sampler has the same expectation
    # (E[z L0] = 0) but O(1) variance, making the bias measurable; common
    # random numbers pair the three noise scales. At 1e-2 the bias falls
    # below the Monte-Carlo floor, so the final decade asserts non-increase
    # within MC slack rather than a strict drop.
    target = np.concatenate([np.concatenate([g.ravel(), b]) for g, b in bp])
    n = 1_000_000
    devs = []
    for sigma in (1e-1, 1e-2, 1e-3):
        means = []
        for layer in range(2):
            jac = layer_jacobian(trace, layer)
            u = RngStream(11, (902, layer)).generator().standard_normal(
                (n, TINY_SPECS[layer].out_dim)
            )
            z = sigma * u
            losses = network.resume_losses(trace.preacts[layer], y, params, layer, z)
            proxies = (z * ((losses - trace.loss) / sigma**2)[:, None]) @ jac
            means.append(proxies.mean(axis=0))
        mean = np.concatenate(means)
        devs.append(float(np.linalg.norm(mean - target) / np.linalg.norm(target)))
    ok = devs[0] > devs[1] and devs[2] <= devs[1] * 1.05
    report(3, ok, f"max |mean-backprop| = {worst_se_units:.2f} se (<=3); "
                  f"relative deviation across sigma: "
                  f"{devs[0]:.2e} -> {devs[1]:.2e} -> {devs[2]:.2e}")
    assert devs[0] > devs[1]
    assert devs[2] <= devs[1] * 1.05


def test_04_variance_law():
    """Proxy covariance within 10% Frobenius of L0^2/sigma^2 J^T J at
    sigma=1e-2 with 1e6 samples."""
    params, x, y = tiny_setup()
    trace = forward_clean(x, y, params)
    sigma, samples = 1e-2, 1_000_000
    rels = []
    for layer in range(2):
        jac = layer_jacobian(trace, layer)
        law = (trace.loss**2 / sigma**2) * (jac.T @ jac)
        _, cov = empirical_proxy_moments(
            (x, y), params, layer, sigma, samples, RngStream(8, (911, layer))
        )
        rels.append(float(np.linalg.norm(cov - law) / np.linalg.norm(law)))
    ok = all(r < 0.10 for r in rels)
    report(4, ok, f"Frobenius-relative covariance errors per layer: "
                  f"{rels[0]:.3f}, {rels[1]:.3f} (<0.10)")
    assert all(r < 0.10 for r in rels)


def test_05_controller_floor():
    """Noise-scale equality on 100 seeded batches; Monte-Carlo covariance of
    the batch-summed estimate meets 0.9x the variance floor."""
    params, _, _ = tiny_setup()
    repeats, clip, target_std = 10, 1.0, 2.0
    floor = target_std**2 * clip**2

    worst_rel = 0.0
    for seed in range(100):
        gen = RngStream(seed, (912,)).generator()
        X = gen.uniform(0.0, 1.0, (8, 2))
        Y = gen.integers(0, 3, 8)
        inputs, _, losses = network.batch_forward(X, Y, params)
        for layer in range(2):
            block = linear_block_covariance_sum(inputs[layer], losses)
            decision = decide_layer_noise(block, repeats, clip, target_std)
            assert not decision.remediated
            oracle = max(float(np.linalg.eigvalsh(block)[0]), 0.0)
            rel = abs(decision.sigma**2 * repeats * floor - oracle) / oracle
            worst_rel = max(worst_rel, rel)
            assert rel <= 1e-9

    # Monte-Carlo floor on one seeded batch, unclipped estimates
    gen = RngStream(21, (903,)).generator()
    b = 6
    X = gen.uniform(0.0, 1.0, (b, 2))
    Y = gen.integers(0, 3, b)
    inputs, preacts, losses = network.batch_forward(X, Y, params)
    layer = 0
    out = TINY_SPECS[layer].out_dim
    block = linear_block_covariance_sum(inputs[layer], losses)
    decision = decide_layer_noise(block, repeats, clip, target_std)
    assert not decision.remediated
    trials = 100_000
    sums = np.zeros((trials, TINY_SPECS[layer].theta_dim))
    for i in range(b):
        z = (
            RngStream(22, (904, i))
            .generator()
            .normal(0.0, decision.sigma, size=(trials, repeats, out))
        )
        losses_k = network.resume_losses(
            preacts[layer][i], int(Y[i]), params, layer, z.reshape(-1, out)
        ).reshape(trials, repeats)
        wbar = np.einsum("tko,tk->to", z, losses_k) / (decision.sigma**2 * repeats)
        x_i = inputs[layer][i]
        sums += np.concatenate(
            [(wbar[:, :, None] * x_i[None, None, :]).reshape(trials, -1), wbar],
            axis=1,
        )
    min_eig = float(np.linalg.eigvalsh(np.cov(sums.T))[0])
    ok = min_eig >= 0.9 * floor
    report(5, ok, f"equality to {worst_rel:.1e} rel over 100 batches; "
                  f"MC min eigenvalue {min_eig:.3f} >= 0.9*{floor}")
    assert min_eig >= 0.9 * floor


def test_06_sampler_fidelity():
    """Truncated-binomial TV < 0.01 at 1e5 draws; geometric rejections."""
    n, q, floor, draws = 30, 0.3, 9, 100_000
    root = RngStream(2024, (5,))
    sizes = np.empty(draws, dtype=int)
    rejections = np.empty(draws, dtype=int)
    for i in range(draws):
        d = draw_batch(n, q, floor, root.child(i))
        sizes[i] = len(d)
        rejections[i] = d.rejections
    exact = exact_truncated_batch_pmf(n, Fraction(3, 10), floor)
    counts = np.bincount(sizes, minlength=n + 1)
    tv = 0.5 * sum(
        abs(counts[k] / draws - float(exact.get(k, 0))) for k in range(n + 1)
    )
    accept = float(exact_binom_sf(floor - 1, n, Fraction(3, 10)))
    expected_rej = (1 - accept) / accept
    rej_err = abs(rejections.mean() - expected_rej) / expected_rej
    ok = tv < 0.01 and rej_err < 0.05
    report(6, ok, f"TV distance {tv:.4f} (<0.01); rejection mean "
                  f"{rejections.mean():.4f} vs geometric {expected_rej:.4f} "
                  f"({100 * rej_err:.1f}% err, <5%)")
    assert tv < 0.01
    assert rej_err < 0.05


def test_07_epsilon_curve_overlap():
    """Composed epsilon with and without the rejection impairment agree to
    0.1% at the optimizing order for the pinned MNIST-scale parameters."""
    q, target_std, steps, delta = 1 / 120, 4.0, 3000, 1e-5
    n_bar = 60_000
    floor = int(0.9 * q * n_bar)
    p = SrgmParams(q, target_std, floor, n_bar)
    with_imp = best_epsilon(p, steps, delta)
    ref_eps, ref_alpha = sgm_reference_epsilon(q, target_std, steps, delta)
    rel = abs(with_imp.epsilon - ref_eps) / ref_eps
    ok = rel < 1e-3
    report(7, ok, f"eps={with_imp.epsilon:.6f} (alpha*={with_imp.alpha:g}) vs "
                  f"impairment-free {ref_eps:.6f} (alpha*={ref_alpha:g}): "
                  f"relative gap {rel:.3e} (<1e-3); per-step impairment "
                  f"{with_imp.impairment_term:.3e}")
    assert rel < 1e-3, (
        f"epsilon gap {rel:.3e} exceeds 1e-3: the rejection floor "
        f"{floor} sits only 2.25 binomial SDs below the mean batch size "
        f"q*N={q * n_bar:.0f}, so the per-step impairment "
        f"{with_imp.impairment_term:.3e} is not negligible against the "
        f"subsampling term at alpha*={with_imp.alpha:g}"
    )


def desk_mnist_config(seed: int = 0) -> RunConfig:
    return RunConfig(
        architecture=(
            LayerSpec(784, 32, "gelu"),
            LayerSpec(32, 16, "gelu"),
            LayerSpec(16, 10, "identity"),
        ),
        privacy=PrivacySpec(
            sampling_rate=0.01,
            target_std=1.0,
            batch_floor=90,
            repeats=100,
            clip_bound=1.0,
            delta=1e-5,
            min_dataset_size=10_000,
        ),
        optimizer=OptimizerSpec(name="adam", learning_rate=0.01),
        epochs=5,
        seed=seed,
    )


def load_desk_mnist():
    d = mnist_dir()
    train = load_mnist_idx(
        next(d.glob("train-images-idx3-ubyte*")),
        next(d.glob("train-labels-idx1-ubyte*")),
    ).take(10_000)
    valid = load_mnist_idx(
        next(d.glob("t10k-images-idx3-ubyte*")),
        next(d.glob("t10k-labels-idx1-ubyte*")),
    )
    return train, valid


@needs_mnist
def test_08_desk_scale_training():
    """3-layer MLP on a 10k MNIST subset: validation accuracy >= 70% after
    5 epochs with strictly decreasing early epoch losses."""
    train, valid = load_desk_mnist()
    _, records = train_dp_ulr(desk_mnist_config(), train, valid=valid)
    final = records[-1]
    epoch_losses = {}
    for r in records:
        epoch_losses.setdefault(r.epoch, []).append(r.train_loss)
    means = [float(np.mean(v)) for _, v in sorted(epoch_losses.items())]
    ok = final.valid_acc >= 0.70 and means[0] > means[1] > means[2]
    report(8, ok, f"validation accuracy {final.valid_acc:.3f} (>=0.70); "
                  f"first-3-epoch mean losses {means[0]:.3f} > {means[1]:.3f} "
                  f"> {means[2]:.3f}")
    assert final.valid_acc >= 0.70
    assert means[0] > means[1] > means[2]


def test_09_remediation_floor():
    """Rank-deficient batch in 3 gradient dims: combined covariance of the
    summed estimate plus top-up noise within 5% of the floor over 1e5
    trials."""
    net = ModelParams(
        (LayerSpec(2, 1, "gelu"), LayerSpec(1, 2, "identity")),
        [np.array([[0.8, -0.5]]), np.array([[1.2], [-0.7]])],
        [np.array([0.1]), np.zeros(2)],
    )
    gen = RngStream(31, (905,)).generator()
    b, repeats, target_std, clip = 2, 8, 2.0, 1.0
    X = gen.uniform(0.0, 1.0, (b, 2))
    Y = gen.integers(0, 2, b)
    inputs, preacts, losses = network.batch_forward(X, Y, net)
    block = linear_block_covariance_sum(inputs[0], losses)
    decision = decide_layer_noise(block, repeats, clip, target_std)
    assert decision.remediated  # 2 examples cannot span 3 dimensions
    trials = 100_000
    sums = np.zeros((trials, 3))
    for i in range(b):
        z = (
            RngStream(32, (906, i))
            .generator()
            .normal(0.0, decision.sigma, size=(trials, repeats, 1))
        )
        losses_k = network.resume_losses(
            preacts[0][i], int(Y[i]), net, 0, z.reshape(-1, 1)
        ).reshape(trials, repeats)
        wbar = np.einsum("tko,tk->to", z, losses_k) / (decision.sigma**2 * repeats)
        sums += wbar * np.concatenate([inputs[0][i], [1.0]])[None, :]
    xi = RngStream(33, (907,)).generator().standard_normal((trials, 3))
    extra = (xi * np.sqrt(decision.plan.variances)) @ decision.plan.basis.T
    min_eig = float(np.linalg.eigvalsh(np.cov((sums + extra).T))[0])
    floor = target_std**2 * clip**2
    rel = abs(min_eig - floor) / floor
    ok = rel <= 0.05
    report(9, ok, f"combined MC min eigenvalue {min_eig:.4f} within "
                  f"{100 * rel:.2f}% of floor {floor} (<=5%)")
    assert rel <= 0.05


@needs_mnist
def test_10_reproducibility(tmp_path):
    """Two runs of the desk-scale config with one seed produce bit-identical
    metrics CSVs."""
    train, valid = load_desk_mnist()
    paths = []
    for run in range(2):
        _, records = train_dp_ulr(desk_mnist_config(seed=11), train, valid=valid)
        path = tmp_path / f"metrics_{run}.csv"
        emit_metrics([r for r in records if r.is_eval_point], path)
        paths.append(path)
    identical = paths[0].read_bytes() == paths[1].read_bytes()
    report(10, identical, "bit-identical metrics CSVs across reruns")
    assert identical
