import numpy as np
import pytest
import torch

from aavs.synthdata import GeneratorConfig


@pytest.fixture
def small_cfg():
    return GeneratorConfig(height=64, width=64, frames=3, num_classes=6, audio_dim=16, max_objects=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    from reference import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
