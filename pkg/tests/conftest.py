import numpy as np
import pytest

from prunelab.model import Model, ModelConfig, init_model

TINY = ModelConfig(d_model=16, n_layers=4, n_heads=2, d_mlp=12, max_seq_len=16)
TINY64 = ModelConfig(d_model=16, n_layers=4, n_heads=2, d_mlp=12, max_seq_len=16, dtype="float64")


@pytest.fixture
def tiny() -> Model:
    return init_model(TINY, seed=0)


@pytest.fixture
def tiny64() -> Model:
    return init_model(TINY64, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def perturbed(model: Model, scale: float = 0.3, seed: int = 7) -> Model:
    """Copy with non-trivial norm weights, so norm gradients are exercised too."""
    r = np.random.default_rng(seed)
    out = model.copy()
    for name, arr in out.params.items():
        if "norm" in name:
            arr += (scale * r.standard_normal(arr.shape)).astype(arr.dtype)
    return out
