import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from astroloc.store import synth_dataset  # noqa: E402


@pytest.fixture(scope="session")
def small_store():
    return synth_dataset(n_locations=30, db_per_location=2, queries_per_location=1, dim=16, noise_sigma=0.3, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
