import numpy as np
import pytest

from reginit.geometry import CameraGeometry
from reginit.projector import ProjectionConfig
from reginit.volume import PhantomSpec, make_phantom


@pytest.fixture(scope="session")
def cam():
    return CameraGeometry()


@pytest.fixture(scope="session")
def phantom():
    """The default 128^3 shell_pair phantom at 2 mm."""
    return make_phantom(128, 2.0, PhantomSpec(seed=1))


@pytest.fixture(scope="session")
def fast_projection():
    return ProjectionConfig(n_samples_per_ray=128)


@pytest.fixture(scope="session")
def small_phantom():
    return make_phantom(32, 8.0, PhantomSpec(seed=1))


@pytest.fixture(scope="session")
def small_cam():
    return CameraGeometry(detector_rows=32, detector_cols=32, pixel_spacing_mm=8.704)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; ``criterion(n, ok, detail)`` prints it and returns ``ok``."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
