import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dpulr.network import LayerSpec, ModelParams, init_params
from dpulr.numkit import RngStream

_MNIST_FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)


def mnist_dir() -> Path | None:
    """Directory holding the IDX files (plain or .gz), if present."""
    candidates = []
    if os.environ.get("DPULR_MNIST_DIR"):
        candidates.append(Path(os.environ["DPULR_MNIST_DIR"]))
    candidates.append(Path(__file__).parents[1] / "data" / "mnist")
    for d in candidates:
        if all(
            (d / name).exists() or (d / f"{name}.gz").exists()
            for name in _MNIST_FILES
        ):
            return d
    return None


needs_mnist = pytest.mark.skipif(
    mnist_dir() is None,
    reason="MNIST IDX files not available; set DPULR_MNIST_DIR or place the "
    "four ubyte[.gz] files under data/mnist",
)


def tiny_net(seed: int = 7, activation: str = "gelu") -> ModelParams:
    """2-4-3 network, 27 parameters."""
    specs = (LayerSpec(2, 4, activation), LayerSpec(4, 3, "identity"))
    return init_params(specs, RngStream(seed, (900,)))


def tiny_example(seed: int = 7) -> tuple[np.ndarray, int]:
    gen = RngStream(seed, (901,)).generator()
    return gen.uniform(0.0, 1.0, 2), int(gen.integers(0, 3))


@pytest.fixture
def net():
    return tiny_net()


@pytest.fixture
def example():
    return tiny_example()
