import pytest
import os
import sys

import numpy as np

# Add the parent directory to sys.path to import the toolkit modules
if os.path.abspath(os.path.join(os.path.dirname(__file__), '..')) not in sys.path:
    sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

os.environ.setdefault("VARIRATE_NO_DOTENV", "1")

from channel import DatasetConfig, generate_dataset
from harness import prepare_dataset


@pytest.fixture
def rng():
    """Seeded generator shared by property tests."""
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def no_seed_override(monkeypatch):
    """Keep VARIRATE_SEED from leaking into tests that do not set it."""
    monkeypatch.delenv("VARIRATE_SEED", raising=False)


@pytest.fixture
def small_config():
    """Tiny dataset dimensions for fast unit tests."""
    return DatasetConfig(n_t=8, n_s=32, n_s_kept=8, num_paths=6, sample_count=24, master_seed=7)


@pytest.fixture
def small_samples(small_config):
    return generate_dataset(small_config)


@pytest.fixture
def toy_config():
    return DatasetConfig.preset("toy", "indoor", sample_count=64, master_seed=3)


@pytest.fixture
def toy_samples(toy_config):
    return generate_dataset(toy_config)


@pytest.fixture
def toy_csinetpro_data(toy_samples, toy_config):
    return prepare_dataset(toy_samples, toy_config, "csinetpro", test_fraction=0.25, seed=0)


@pytest.fixture
def toy_dualnetsph_data(toy_samples, toy_config):
    return prepare_dataset(toy_samples, toy_config, "dualnetsph", test_fraction=0.25, seed=0)
