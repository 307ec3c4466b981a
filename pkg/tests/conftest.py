import sys
from pathlib import Path

import numpy as np
import pytest

from asds import training as tr
from asds.imaging import load_image

DATA = Path(__file__).parent / "data"


def uniform_model(patch_size=7, ar_value=1.0 / 8.0, dictionary=None):
    """One-cluster model with a full-rank identity dictionary."""
    n = patch_size * patch_size
    phi = np.eye(n) if dictionary is None else dictionary
    return tr.LearnedModel(
        patch_size, np.zeros((1, n)), [phi], np.full((1, 8), ar_value), np.eye(1, n)
    )


def training_images():
    return [load_image(p) for p in sorted(DATA.glob("train_*.pgm"))]


@pytest.fixture(scope="session")
def trained_model():
    cfg = tr.TrainConfig(clusters=20, min_cluster=150, max_patches=6000, seed=1)
    return tr.train(training_images(), cfg)


@pytest.fixture(scope="session")
def held_out():
    return load_image(DATA / "camera_128.pgm")


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for outcome in acceptance.RESULTS:
        terminalreporter.write_line(outcome.line())
