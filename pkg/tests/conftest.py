import sys

import numpy as np
import pytest

from d2d.bench import aligned_lmn
from d2d.pipeline import PipelineConfig
from d2d.world import make_world


@pytest.fixture(scope="session")
def world():
    return make_world(0)


@pytest.fixture(scope="session")
def aligned(world):
    return aligned_lmn(world.d, PipelineConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)



def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
