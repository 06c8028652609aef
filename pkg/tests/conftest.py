import numpy as np
import pytest

from latent_isp.geometry import GridSpec, marching_cubes


def sphere_sdf(radius, center=(0.0, 0.0, 0.0)):
    c = np.asarray(center, dtype=float)
    return lambda x: np.linalg.norm(np.atleast_2d(x) - c, axis=1) - radius


@pytest.fixture(scope="session")
def sphere_mesh():
    """Radius-0.5 sphere extracted at the default spacing."""
    return marching_cubes(sphere_sdf(0.5), GridSpec())


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


def uv_sphere(n_lon=10, n_lat=6, radius=0.5):
    """Latitude-longitude sphere with ``2 n_lon (n_lat - 1)`` faces (100 by default)."""
    from latent_isp.geometry import TriangleMesh

    theta = np.linspace(0.0, np.pi, n_lat + 1)[1:-1]
    phi = np.arange(n_lon) * 2 * np.pi / n_lon
    rings = [np.stack([np.sin(t) * np.cos(phi), np.sin(t) * np.sin(phi), np.full(n_lon, np.cos(t))], 1)
             for t in theta]
    verts = np.concatenate([[[0, 0, 1.0]], *rings, [[0, 0, -1.0]]]) * radius

    def idx(r, j):
        return 1 + r * n_lon + j % n_lon

    faces = [[0, idx(0, j), idx(0, j + 1)] for j in range(n_lon)]
    for r in range(n_lat - 2):
        for j in range(n_lon):
            a, b, c, d = idx(r, j), idx(r, j + 1), idx(r + 1, j), idx(r + 1, j + 1)
            faces += [[a, c, d], [a, d, b]]
    south = len(verts) - 1
    faces += [[south, idx(n_lat - 2, j + 1), idx(n_lat - 2, j)] for j in range(n_lon)]
    return TriangleMesh(verts, np.array(faces))


@pytest.fixture(scope="session")
def sphere_system(sphere_mesh):
    """Assembled operator for the radius-0.5 sphere at ``k = pi``."""
    from latent_isp.helmholtz_bem import assemble

    return assemble(sphere_mesh, np.pi)


# ---------------------------------------------------------------------------
# one pass/fail line per acceptance criterion
# ---------------------------------------------------------------------------
_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion this test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    entry = _CRITERIA.setdefault(marker.args[0], {"ok": True, "ran": False, "details": []})
    if report.when == "call":
        entry["ran"] = True
        entry["details"] += [v for k, v in report.user_properties if k == "detail"]
    if report.failed:
        entry["ok"] = False
    if report.skipped:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, entry in _CRITERIA.items():
        status = "PASS" if entry["ok"] and entry["ran"] else "FAIL"
        detail = "; ".join(entry["details"])
        terminalreporter.write_line(f"{status}  {label}" + (f"  [{detail}]" if detail else ""))
