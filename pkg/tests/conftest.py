"""Shared test fixtures for tract-stack tests."""

import numpy as np
import pytest

from tract_stack.config import TrainConfig
from tract_stack.phantom import PhantomSpec, generate
from tract_stack.unet import UNetConfig, build


@pytest.fixture(autouse=True)
def disable_project_dotenv(monkeypatch):
    """Keep developer .env files and seed overrides from influencing tests."""
    monkeypatch.setenv("TRACT_STACK_DISABLE_DOTENV", "1")
    monkeypatch.delenv("TRACT_STACK_SEED", raising=False)
    monkeypatch.delenv("TRACT_STACK_THREADS", raising=False)


@pytest.fixture
def small_spec():
    """A 24^3 phantom small enough for per-test generation."""
    return PhantomSpec(dim=24, tube_radius_vox=1.5, arc_radius=10.0, sheet_thickness=2.0)


@pytest.fixture
def small_phantom(small_spec):
    return generate(small_spec)


@pytest.fixture
def tiny_net_config():
    return UNetConfig(in_channels=9, depth=2, base_filters=4)


@pytest.fixture
def tiny_params(tiny_net_config):
    return build(tiny_net_config, seed=3)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(epochs=2, batch_size=8, preset="tiny", dropout_p=0.0, batch_size_eval=16)


def seeded(shape, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)
