import numpy as np
import pytest

from terraseg.core import PointCloud


def make_cloud(x, y, z=None, intensity=None, las_class=None, sensor_id=None, color=None, encoded=False):
    """Small synthetic cloud with sensible defaults for every column."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    ones = np.ones(n, dtype=np.uint8)
    return PointCloud(
        x, np.asarray(y, dtype=np.float64),
        np.zeros(n) if z is None else np.asarray(z, dtype=np.float64),
        np.full(n, 100.0) if intensity is None else np.asarray(intensity, dtype=np.float64),
        np.zeros(n, dtype=np.int16), ones, ones,
        np.zeros(n, dtype=np.uint8) if las_class is None else np.asarray(las_class, dtype=np.uint8),
        np.zeros(n, dtype=np.uint16) if sensor_id is None else np.asarray(sensor_id, dtype=np.uint16),
        color, encoded,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_world():
    from terraseg import synth
    return synth.generate_world(synth.WorldSpec(seed=7, extent=100.0, density=10.0))


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
