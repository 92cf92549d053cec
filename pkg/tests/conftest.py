"""Shared fixtures: pretrained source models are built once per session."""

from __future__ import annotations

import numpy as np
import pytest

from ctta import experiment, nn

# the shipped default experiment's source model
DEFAULT_SOURCE = dict(architecture_id="cnn-small", num_classes=10, train_size=4000, test_size=1000, epochs=20, seed=0)
SMALL_SOURCE = dict(architecture_id="cnn-small", num_classes=4, train_size=1000, test_size=400, epochs=20, seed=0)


@pytest.fixture(scope="session")
def small_pretrained() -> nn.PretrainResult:
    return experiment.pretrained_source(**SMALL_SOURCE)


@pytest.fixture(scope="session")
def default_pretrained() -> nn.PretrainResult:
    return experiment.pretrained_source(**DEFAULT_SOURCE)


@pytest.fixture
def small_source(small_pretrained) -> nn.ModelState:
    return nn.snapshot(small_pretrained.model)


@pytest.fixture
def source10(default_pretrained) -> nn.ModelState:
    return nn.snapshot(default_pretrained.model)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance reporting: one pass/fail line per criterion in the terminal summary
# ---------------------------------------------------------------------------


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
