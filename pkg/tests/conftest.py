import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from dygait import synthgait  # noqa: E402
from dygait.model import ModelConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(stage_channels=(3, 4), pool_after=(0,), strips=2, embed_dim=5, input_size=(8, 6))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """4 identities x 6 sequences x 18 frames at 32x22; 2 train, 2 gallery, 2 probe per identity."""
    out = tmp_path_factory.mktemp("synth")
    manifest = synthgait.generate_dataset(str(out), n_identities=4, seqs_per_id=6, n_frames=18, seed=5,
                                          size=(32, 22))
    return str(out), manifest


ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """``acceptance(n, passed, detail)`` records the result line for acceptance criterion ``n``."""

    def record(n, passed, detail):
        ACCEPTANCE[n] = f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
