import math

import numpy as np
import pytest

from chns import FeSystem, build_uniform_mesh
from chns.stepper import Mobility, PhysParams, SchemeParams


_ACCEPTANCE: dict = {}


def record_acceptance(number, line):
    _ACCEPTANCE[number] = line


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])


@pytest.fixture(scope="session")
def fe4():
    return FeSystem(build_uniform_mesh(4, 4))


@pytest.fixture(scope="session")
def fe8():
    return FeSystem(build_uniform_mesh(8, 8))


@pytest.fixture(scope="session")
def fe16():
    return FeSystem(build_uniform_mesh(16, 16))


@pytest.fixture
def phys():
    return PhysParams(0.04, 100.0, 25.0, Mobility("constant", 1.0))


@pytest.fixture
def scheme():
    return SchemeParams(0.005, picard_tol=1e-10, newton_tol=1e-10)


def cosine_phi(x, y):
    return 0.24 * np.cos(2 * np.pi * x) * np.cos(2 * np.pi * y) + 0.4 * np.cos(np.pi * x) * np.cos(3 * np.pi * y)


def vortex_u(x, y):
    return (-np.sin(np.pi * x) ** 2 * np.sin(2 * np.pi * y),
            np.sin(np.pi * y) ** 2 * np.sin(2 * np.pi * x))


def leggauss_triangle(n):
    """Independent Duffy-collapsed tensor rule built from numpy's Gauss-Legendre nodes.

    Returns barycentric points and weights normalized to sum 1.
    """
    x, w = np.polynomial.legendre.leggauss(n)
    s = 0.5 * (x + 1.0)
    ws = 0.5 * w
    pts, wts = [], []
    for si, wi in zip(s, ws):
        for tj, wj in zip(s, ws):
            # (s, t) in the unit square -> (s, (1 - s) t) in the triangle
            a, b = si, (1.0 - si) * tj
            pts.append((1.0 - a - b, a, b))
            wts.append(wi * wj * (1.0 - si))
    wts = np.array(wts)
    return np.array(pts), wts / wts.sum()


def local_basis(P, bary):
    """Independent evaluation of the four P1b functions and their gradients at barycentric points."""
    T = np.array([[P[1, 0] - P[0, 0], P[2, 0] - P[0, 0]], [P[1, 1] - P[0, 1], P[2, 1] - P[0, 1]]])
    Tinv = np.linalg.inv(T)
    # grad l1 = row 0 of Tinv, grad l2 = row 1, grad l0 = -(sum)
    g = np.vstack([-(Tinv[0] + Tinv[1]), Tinv[0], Tinv[1]])
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    vals = np.column_stack([l0, l1, l2, 27 * l0 * l1 * l2])
    gb = 27 * (np.outer(l1 * l2, g[0]) + np.outer(l0 * l2, g[1]) + np.outer(l0 * l1, g[2]))
    grads = np.stack([np.broadcast_to(g[0], gb.shape), np.broadcast_to(g[1], gb.shape),
                      np.broadcast_to(g[2], gb.shape), gb], axis=1)
    pts = bary @ P
    return pts, vals, grads, abs(np.linalg.det(T)) / 2


SQRT2 = math.sqrt(2.0)
