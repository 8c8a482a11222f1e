"""Shared fixtures: a small model configuration and a matching dataset.

Everything here is sized for speed. The tiny config exercises both resample
levels of the trunk (8 -> 4 -> 2 tokens) while keeping parameter counts in
the low thousands.
"""

from __future__ import annotations

import numpy as np
import pytest

from eventflow.dataset import (
    MultimodalDataset,
    SyntheticConfig,
    generate_synthetic,
    make_windows,
)
from eventflow.denoiser import DenoiserParams, ModelConfig, init_params


@pytest.fixture(scope="session")
def tiny_config() -> ModelConfig:
    return ModelConfig(
        W=8,
        patch=1,
        M=2,
        d_model=16,
        d_state=8,
        m_state=2,
        d_text=16,
        d_ff=32,
        n_heads=2,
        resample=2,
    )


@pytest.fixture(scope="session")
def tiny_params(tiny_config) -> DenoiserParams:
    return init_params(tiny_config, seed=0)


@pytest.fixture(scope="session")
def tiny_params_perturbed(tiny_config) -> DenoiserParams:
    """Generic nonzero parameters: init plus small noise on every tensor.

    Several tensors are zero at init (output gates, the prediction head), which
    makes whole subgraphs inactive. Tests probing information flow need the
    perturbed version.
    """
    params = init_params(tiny_config, seed=0)
    rng = np.random.default_rng(7)
    for t in params.tensors.values():
        t.data = t.data + rng.normal(0.0, 0.02, size=t.data.shape)
    return params


@pytest.fixture(scope="session")
def small_dataset() -> MultimodalDataset:
    return generate_synthetic(
        SyntheticConfig(n_waves=30, points_per_wave=8, seed=1, d_text=16)
    )


@pytest.fixture(scope="session")
def small_windows(small_dataset):
    return make_windows(small_dataset, p=2, q=1)
