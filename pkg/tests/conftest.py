import os

import numpy as np
import pytest
from hypothesis import settings

from fusionkit.checkpoint_io import save_map

settings.register_profile("ci", max_examples=50, deadline=None)
settings.register_profile("dev", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def write_map(tmp_path):
    counter = iter(range(10**6))

    def _write(m, name=None):
        path = tmp_path / f"{name or 'ckpt'}_{next(counter)}.safetensors"
        save_map(m, path)
        return path

    return _write


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
