import sys
from pathlib import Path

import numpy as np
import pytest

from reld.generate import GenConfig, keyed_rng, sample_instance
from reld.model import ModelConfig, init_params

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "data"
TEST_DATA = Path(__file__).resolve().parent / "data"


def tiny_model(**flags) -> ModelConfig:
    """A narrow model that keeps finite-difference and fuzz tests fast."""
    base = dict(d_h=16, heads=4, layers=2, d_ff=32)
    base.update(flags)
    return ModelConfig(**base)


def make_instance(n: int, seed: int = 0, **gen):
    return sample_instance(GenConfig(size_range=(n, n), seed=seed, **gen), keyed_rng(seed, n))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    return tiny_model()


@pytest.fixture
def small_params(small_cfg):
    return init_params(small_cfg, keyed_rng(7, 0))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for num in sorted(results):
            terminalreporter.write_line(results[num])
