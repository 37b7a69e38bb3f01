import numpy as np
import pytest
from hypothesis import settings

from angioflow.vessel_tree import build_tree, resample

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

# criterion lines collected by the acceptance module, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def straight_tree(length=20.0, radius=1.0, h=0.46, direction=(0.0, 1.0, 0.0), start=None):
    d = np.asarray(direction, dtype=float)
    d /= np.linalg.norm(d)
    a = -0.5 * length * d if start is None else np.asarray(start, dtype=float)
    pts = np.array([a, a + length * d])
    raw = build_tree([(0, None, pts, np.full(2, radius))])
    return resample(raw, h)


def y_tree(h=0.46, r_children=(1.0, 1.0)):
    root = np.array([[0.0, 0.0, -10.0], [0.0, 0.0, 0.0]])
    left = np.array([[0.0, 0.0, 0.0], [-6.0, 0.0, 8.0]])
    right = np.array([[0.0, 0.0, 0.0], [6.0, 0.0, 8.0]])
    raw = build_tree([
        (0, None, root, np.full(2, 1.5)),
        (1, 0, left, np.full(2, r_children[0])),
        (2, 0, right, np.full(2, r_children[1])),
    ])
    return resample(raw, h)


@pytest.fixture
def straight():
    return straight_tree()


@pytest.fixture
def ytree():
    return y_tree()
