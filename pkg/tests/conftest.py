"""Shared fixtures for the patchlab test suite.

Builds one small synthetic dataset and one small trained detector per
session so that integration-level tests do not each pay the training
cost.  Also collects the one-line verdicts emitted by the acceptance
tests and replays them in the terminal summary.
"""

from __future__ import annotations

import pytest

from patchlab.data import synth_dataset
from patchlab.detector import ToyDetectorConfig, ToyTrainConfig, train_toy_detector

TINY_CLASSES = 4
TINY_IMAGE_SIZE = 128


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance_log(request):
    """Returns a callable that records one verdict line per criterion."""

    def log(line: str) -> None:
        request.config._acceptance_lines.append(line)
        print(line)

    return log


@pytest.fixture(scope="session")
def tiny_ds(tmp_path_factory):
    """A small on-disk synthetic dataset shared across test modules."""
    root = tmp_path_factory.mktemp("tiny_data")
    return synth_dataset(
        root,
        counts={"train": 24, "val": 8, "test": 8},
        image_size=TINY_IMAGE_SIZE,
        num_classes=TINY_CLASSES,
        seed=0,
    )


@pytest.fixture(scope="session")
def tiny_detector(tiny_ds):
    """A quickly trained detector on the tiny dataset (quality is modest)."""
    cfg = ToyDetectorConfig(
        num_classes=TINY_CLASSES, image_size=TINY_IMAGE_SIZE, widths=(8, 16, 32, 48, 64)
    )
    adapter, _ = train_toy_detector(
        tiny_ds, cfg, ToyTrainConfig(epochs=20, batch_size=8, seed=0)
    )
    return adapter
