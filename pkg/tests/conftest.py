import numpy as np
import pytest

from retcap.config import ModelConfig
from retcap.data import generate_synthetic, load_dataset
from retcap.rng import Rng


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def tiny_config():
    """Smallest config that still exercises every module."""
    return ModelConfig(channels=8, c_att=4, reduction=2, d_model=16, heads=2, d_ff=32,
                       dec_layers=1, max_len=20, batch_size=4, epochs=2)


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("syn")
    cfg = ModelConfig(channels=8, c_att=4, reduction=2)
    generate_synthetic(cfg, 10, seed=7, out_dir=out)
    return out


@pytest.fixture
def synthetic_dataset(synthetic_dir, tiny_config):
    return load_dataset(synthetic_dir / "manifest.jsonl", tiny_config)


def randn(seed, *shape):
    return np.random.default_rng(seed).standard_normal(shape)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
