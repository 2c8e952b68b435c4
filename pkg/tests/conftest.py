import numpy as np
import pytest

from mixsr.imaging import PlanarImage


def randomize(module, rng, scale=0.5):
    """Replace every parameter with O(1) random values (thresholds stay positive)."""
    for name, p in module.parameters().items():
        if name.endswith("thresholds"):
            p.value[...] = rng.uniform(0.05, 0.3, p.value.shape)
        else:
            p.value[...] = rng.normal(0.0, scale, p.value.shape)
    return module


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def camera():
    from skimage import data

    return PlanarImage(data.camera() / 255.0)


@pytest.fixture(scope="session")
def astronaut():
    from skimage import data

    return PlanarImage(data.astronaut() / 255.0)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(module.RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
        terminalreporter.write_line(line)
