import numpy as np
import pytest

from texloc.core import Pose2
from texloc.features import extract
from texloc.synth import generate_texture, sample_query


@pytest.fixture(scope="session")
def texture():
    return generate_texture(5, 2400, 1800, "scratchy")


@pytest.fixture(scope="session")
def frame(texture):
    return sample_query(texture, Pose2(0.0, 300.0, 250.0)).image


@pytest.fixture(scope="session")
def frame_features(frame):
    return extract(frame)


@pytest.fixture(scope="session")
def descriptor_pool(texture, frame_features):
    """Real 128-d descriptors from four overlapping crops of one texture."""
    sets = [frame_features]
    for p in (Pose2(0.4, 900.0, 300.0), Pose2(-1.0, 500.0, 1200.0), Pose2(2.5, 2000.0, 1000.0)):
        sets.append(extract(sample_query(texture, p).image))
    return np.vstack([s.descriptors for s in sets])


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
