import numpy as np
import pytest

from trj.data.primitives import grid, icosphere, tube
from trj.mesh import TriMesh

ACCEPTANCE_LINES: list[str] = []


def report(criterion: str, ok: bool, detail: str) -> None:
    """Record and print one acceptance line, then fail the test if needed."""
    line = f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def wavy_sheet(n=16, seed=0) -> TriMesh:
    """Jittered grid lifted into a smooth bump; 2*n*n faces."""
    g = grid(n, n, jitter=0.25, seed=seed)
    v = g.vertices.copy()
    v[:, 2] = 0.2 * np.sin(3 * v[:, 0]) * np.cos(2 * v[:, 1])
    return TriMesh(v, g.faces)


def bend(points: np.ndarray, angle: float = 1.2, axis_len: float = 1.0) -> np.ndarray:
    """Bend a z-aligned shape about the y axis, smoothly along its length."""
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    theta = angle * z / axis_len
    r = axis_len / angle
    out = np.empty_like(points)
    out[..., 0] = (r - x) * np.cos(theta) - r
    out[..., 0] *= -1
    out[..., 1] = y
    out[..., 2] = (r - x) * np.sin(theta)
    return out


@pytest.fixture
def sphere():
    return icosphere(2)


@pytest.fixture
def sheet():
    return wavy_sheet()


@pytest.fixture
def cylinder():
    return tube(length=1.0, radius=0.1, sides=12, rings=12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
