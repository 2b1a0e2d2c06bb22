"""Forward-learning training with differential privacy.

Gradients are estimated from noisy forward passes (a likelihood-ratio
proxy), a per-step controller sizes the injected noise so the released
batch gradient meets a variance floor in every direction, and a Renyi-DP
accountant tracks the privacy cost of the rejection-sampled Gaussian
mechanism this induces. A per-example-clipped gradient-perturbation
baseline (DP-SGD) shares the same harness.
"""

from .accountant import (
    EpsilonReport,
    RdpLedger,
    SrgmParams,
    best_epsilon,
    impairment_ratio,
    rdp_to_dp,
    srgm_step_rdp,
)
from .config import PrivacySpec, RunConfig, load_config, parse_config
from .controller import ControllerReport, remediation_noise, select_sigma
from .data import Dataset, load_mnist_idx, synth_dataset
from .estimator import ExampleGradient, estimate_example_gradient, lr_proxy
from .network import (
    ForwardTrace,
    LayerSpec,
    ModelParams,
    backprop_gradients,
    forward_clean,
    forward_noisy,
    init_params,
    layer_jacobian,
)
from .numkit import RngStream
from .sampler import BatchDraw, batch_size_pmf, draw_batch
from .training import StepRecord, emit_metrics, train, train_dp_sgd, train_dp_ulr

__version__ = "0.1.0"
