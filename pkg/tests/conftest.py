import numpy as np
import pytest

from anomaly3d.geometry import PointCloud


def fibonacci_sphere(n: int, radius: float = 1.0) -> np.ndarray:
    """Near-uniform deterministic sphere sampling."""
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = np.pi * (1.0 + 5.0 ** 0.5) * i
    return radius * np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def random_sphere(n: int, seed: int = 0, radius: float = 1.0) -> np.ndarray:
    v = np.random.default_rng(seed).normal(size=(n, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def plane_grid(side: int = 30, spacing: float = 0.05) -> np.ndarray:
    g = np.arange(side) * spacing
    x, y = np.meshgrid(g, g, indexing="ij")
    return np.stack([x.ravel(), y.ravel(), np.zeros(side * side)], axis=1)


def sphere_cloud(n: int = 2000, seed: int = 0) -> PointCloud:
    p = random_sphere(n, seed)
    return PointCloud(p, p.copy())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def bulge_sphere(seed: int, n: int = 10000, fraction: float = 0.05, magnitude: float = 0.3):
    """Unit sphere with a Gaussian bulge covering ``fraction`` of the points.

    Returns the displaced points and the mask of points inside the bulge
    footprint (within 3 sigma of the seed).
    """
    p = random_sphere(n, seed)
    s = p[0].copy()
    d = np.linalg.norm(p - s, axis=1)
    footprint = np.quantile(d, fraction)
    sigma = footprint / 3.0
    inside = d <= footprint
    disp = magnitude * np.exp(-d ** 2 / (2 * sigma ** 2)) * inside
    return p + disp[:, None] * s, inside


# Scaled-down run configuration used by the CLI and determinism tests.
SMALL_INI = """\
[run]
seed = 3

[synth]
classes = sphere, box
n_points = 8000
n_test = 28
n_test_normal = 10
mesh_vertices = 800

[model]
d = 16
enc_layers = 1
dec_layers = 1
heads = 2
mlp_ratio = 2
k = 16
n_c = 48
embed_hidden = 16

[train]
steps = 6

[detect]
score_k = 16
"""


# One line per acceptance criterion, printed in the terminal summary.
ACCEPTANCE_LINES = []


def record_criterion(number: int, name: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({name}): {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
