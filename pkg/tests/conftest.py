import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from scipy.spatial import ConvexHull

from contactsdf.geometry import build_from_mesh

settings.register_profile(
    "default", max_examples=100, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_polytope(rng, n_points=20, scale=0.05):
    """Convex hull of random points, as a plane set (at most 2 * n_points planes)."""
    pts = rng.normal(size=(n_points, 3)) * scale
    hull = ConvexHull(pts)
    used = np.unique(hull.simplices)
    remap = {int(v): i for i, v in enumerate(used)}
    faces = [[remap[int(v)] for v in tri] for tri in hull.simplices]
    return build_from_mesh(pts[used], faces)


def exterior_points(planes, rng, n, low, high):
    """Random points whose exact distance to ``planes`` lies in [low, high)."""
    from contactsdf.geometry import exact_distance

    out = []
    center = planes.interior_point
    radius = np.max(np.linalg.norm(planes.vertices - center, axis=1))
    while len(out) < n:
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        x = center + d * rng.uniform(0.0, radius + high)
        dist = exact_distance(planes, x).distance
        if low <= dist < high:
            out.append(x)
    return np.array(out)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, repeated in the terminal summary so that
# it is visible without -s
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def criterion():
    def record(name, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
