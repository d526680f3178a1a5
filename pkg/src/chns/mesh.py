"""Uniform conforming triangulations of axis-aligned rectangles."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIDES = ("left", "right", "bottom", "top")


@dataclass(frozen=True, eq=False)
class Mesh:
    """A structured triangle mesh of ``[0, lx] x [0, ly]``.

    Vertices are numbered row-major (``j * (nx + 1) + i``); every cell is cut
    by its lower-left to upper-right diagonal, giving two counterclockwise
    triangles per cell.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_vertices: np.ndarray
    boundary_edges: list
    h: float
    nx: int
    ny: int
    lx: float
    ly: float

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def area(self) -> float:
        return self.lx * self.ly

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def edge_counts(self) -> dict:
        """Map each undirected edge ``(a, b)`` with ``a < b`` to its triangle count."""
        counts: dict = {}
        for tri in self.triangles:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (min(a, b), max(a, b))
                counts[key] = counts.get(key, 0) + 1
        return counts

    def locate(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Return the containing triangle and barycentric coordinates of each point.

        Points on shared edges are assigned to one of the neighbours; either
        choice gives the same value for continuous fields.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        tol = 1e-12 * max(self.lx, self.ly)
        x, y = pts[:, 0], pts[:, 1]
        if np.any((x < -tol) | (x > self.lx + tol) | (y < -tol) | (y > self.ly + tol)):
            raise ValueError("point outside the domain")
        dx = self.lx / self.nx
        dy = self.ly / self.ny
        s = np.clip(x / dx, 0.0, self.nx)
        t = np.clip(y / dy, 0.0, self.ny)
        i = np.minimum(np.floor(s).astype(np.int64), self.nx - 1)
        j = np.minimum(np.floor(t).astype(np.int64), self.ny - 1)
        # local cell coordinates in [0, 1]^2
        a = s - i
        b = t - j
        upper = b > a
        tri = 2 * (j * self.nx + i) + upper
        # lower triangle (v00, v10, v11): lambda = (1-a, a-b, b)
        # upper triangle (v00, v11, v01): lambda = (1-b, a, b-a)
        lam = np.where(
            upper[:, None],
            np.stack([1.0 - b, a, b - a], axis=1),
            np.stack([1.0 - a, a - b, b], axis=1),
        )
        return tri, lam


def build_uniform_mesh(nx: int, ny: int, domain=(1.0, 1.0)) -> Mesh:
    """Build an ``nx`` by ``ny`` uniform mesh of the rectangle ``[0, Lx] x [0, Ly]``.

    ``domain`` is the pair ``(Lx, Ly)``.
    """
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise ValueError(f"nx and ny must be positive integers, got {nx}, {ny}")
    lx, ly = (float(v) for v in domain)
    if not (lx > 0 and ly > 0):
        raise ValueError(f"domain extents must be positive, got {lx}, {ly}")
    nx, ny = int(nx), int(ny)

    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    jj, ii = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    v00 = (jj * (nx + 1) + ii).ravel()
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    bmask = np.zeros_like(idx, dtype=bool)
    bmask[0, :] = bmask[-1, :] = bmask[:, 0] = bmask[:, -1] = True
    boundary_vertices = idx[bmask]

    edges = []
    for j in range(ny):
        edges.append((int(idx[j, 0]), int(idx[j + 1, 0]), "left"))
        edges.append((int(idx[j, nx]), int(idx[j + 1, nx]), "right"))
    for i in range(nx):
        edges.append((int(idx[0, i]), int(idx[0, i + 1]), "bottom"))
        edges.append((int(idx[ny, i]), int(idx[ny, i + 1]), "top"))

    h = float(np.hypot(lx / nx, ly / ny))
    return Mesh(vertices, triangles, boundary_vertices, edges, h, nx, ny, lx, ly)
