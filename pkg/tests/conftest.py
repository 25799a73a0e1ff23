import numpy as np
import pytest

from dropfilter.harness import TrainConfig
from dropfilter.models import ModelConfig
from dropfilter.optim import LrSchedule
from dropfilter.tensor import Rng

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def tiny_cfg():
    """A seconds-long synthetic training config."""
    return TrainConfig(
        model=ModelConfig(family="plain", n=1, width_factor=1),
        schedule=LrSchedule("cosine", base_lr=0.05),
        epochs=2,
        batch_size=40,
        dataset="synthetic",
        synthetic_classes=4,
        synthetic_per_class=20,
        synthetic_test_per_class=10,
    )


def random_tensor(seed, shape, scale=1.0):
    return np.random.default_rng(seed).normal(0.0, scale, size=shape)
