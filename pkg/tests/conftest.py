from __future__ import annotations

import sys

import pytest

from dualmae.masking import DualMaskConfig
from dualmae.model import ModelConfig, init_autoencoder
from dualmae.numerics import Rng


@pytest.fixture
def toy_cfg() -> ModelConfig:
    return ModelConfig()


@pytest.fixture
def dual() -> DualMaskConfig:
    return DualMaskConfig()


@pytest.fixture
def toy_state(toy_cfg):
    return init_autoencoder(toy_cfg, Rng(0))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
