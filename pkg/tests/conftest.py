"""Shared test fixtures and configuration."""

import os
import sys

import numpy as np
import pytest
import torch

# Add the src directory to Python path for testing
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from mytm.adapter import build_adapter
from mytm.backends.toy import build_toy_bundle, make_synthetic_collection
from mytm.config import AdapterConfig, RunConfig
from mytm.data import load_manifest
from mytm.session import ToolSession

TRAIN_AGES = [round(float(a), 1) for a in np.linspace(30, 70, 12)]
REFERENCE_AGES = [30, 40, 50, 60, 70]
TEST_AGES = [70]


@pytest.fixture
def toy_bundle():
    """Double-precision toy backend."""
    return build_toy_bundle(seed=0, dtype=torch.float64)


@pytest.fixture
def small_adapter_config():
    """Adapter with every width divided by 16."""
    return AdapterConfig().reduced(16)


@pytest.fixture
def make_perturbed_adapter():
    """Factory for adapters whose zero-initialised output layers have been randomised."""

    def factory(config=None, seed=0, scale=0.05):
        net = build_adapter(config, seed=seed, dtype=torch.float64)
        gen = torch.Generator().manual_seed(1000 + seed)
        with torch.no_grad():
            for param in net.parameters():
                param.add_(scale * torch.randn(param.shape, generator=gen, dtype=param.dtype))
        return net

    return factory


@pytest.fixture
def synthetic_manifest(tmp_path):
    """Twelve train photos over 30-70, references every ten years, one test photo at 70."""
    return make_synthetic_collection(
        tmp_path / "person",
        train_ages=TRAIN_AGES,
        reference_ages=REFERENCE_AGES,
        test_ages=TEST_AGES,
        seed=7,
    )


@pytest.fixture
def synthetic_collection(synthetic_manifest):
    return load_manifest(synthetic_manifest)


@pytest.fixture
def fast_config(small_adapter_config):
    """Double-precision toy run config with a tiny adapter."""
    return RunConfig(
        dtype="float64",
        iterations=20,
        learning_rate=1e-3,
        checkpoint_every=10,
        log_every=10,
    ).with_adapter(small_adapter_config)


@pytest.fixture
def toy_session(toy_bundle):
    return ToolSession(config=RunConfig(dtype="float64"), bundle=toy_bundle)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
