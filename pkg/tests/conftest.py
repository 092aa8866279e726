import sys

import numpy as np
import pytest

from carmreg.geom import CArmPose
from carmreg.volume import PhantomSpec, make_phantom


@pytest.fixture(scope="session")
def small_phantom():
    """64^3 phantom with the full 382.5 mm field of view."""
    return make_phantom(PhantomSpec(dims=(64, 64, 64), spacing_mm=(382.5 / 63,) * 3), seed=0)


@pytest.fixture(scope="session")
def phantom256():
    return make_phantom(PhantomSpec(), seed=0)


@pytest.fixture
def ap_pose():
    return CArmPose(0.0, 0.0, 0.0, 1000.0, 750.0, (0.0, 0.0, 0.0))


def random_pose(rng, iso_half=50.0):
    return CArmPose(rng.uniform(-2, 2), rng.uniform(0, 50), rng.uniform(-10, 10),
                    rng.uniform(850, 1250), rng.uniform(720, 820),
                    tuple(rng.uniform(-iso_half, iso_half, 3)))


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
