"""P1 and P1-bubble finite element spaces on a :class:`~chns.mesh.Mesh`.

Scalar unknowns (phase field, chemical potential, pressure) live in the
continuous P1 space whose dofs are the mesh vertices.  Velocity components
live in P1 enriched with the cubic bubble ``27 l1 l2 l3`` of each triangle
(the MINI element).  A velocity coefficient vector stores the x component
first and the y component second, each laid out as ``[vertex dofs, bubble
dofs]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .mesh import Mesh

SCALAR = "scalar_P1"
VELOCITY = "velocity_P1b"
PRESSURE = "pressure_P1_meanzero"
SPACES = (SCALAR, VELOCITY, PRESSURE)

BUBBLE_SCALE = 27.0


@lru_cache(maxsize=None)
def triangle_quadrature(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed Gauss-Jacobi rule on the reference triangle.

    Returns barycentric points ``(n, 3)`` and positive weights summing to 1;
    the rule is exact for polynomials of total degree ``<= degree``.
    """
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    n = max(1, math.ceil((degree + 1) / 2))
    s, ws = roots_jacobi(n, 1.0, 0.0)
    r, wr = roots_legendre(n)
    v = 0.5 * (1.0 + s)
    u = 0.5 * (1.0 + r)
    V, U = np.meshgrid(v, u, indexing="ij")
    W = np.outer(ws, wr)
    x = (U * (1.0 - V)).ravel()
    y = V.ravel()
    w = W.ravel()
    w = w / w.sum()
    bary = np.column_stack([1.0 - x - y, x, y])
    bary.setflags(write=False)
    w.setflags(write=False)
    return bary, w


def bubble(bary: np.ndarray) -> np.ndarray:
    return BUBBLE_SCALE * bary[..., 0] * bary[..., 1] * bary[..., 2]


class FeSystem:
    """Dof layout, element geometry and quadrature data for one mesh.

    Treat instances as immutable; derived element arrays are computed lazily
    and cached.
    """

    default_degree = 4

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        nv, nt = mesh.n_vertices, mesh.n_triangles
        self.n_scalar_dofs = nv
        self.n_component_dofs = nv + nt
        self.n_velocity_dofs = 2 * (nv + nt)
        self.scalar_cell_dofs = mesh.triangles
        self.component_cell_dofs = np.column_stack([mesh.triangles, nv + np.arange(nt)])
        bv = np.sort(mesh.boundary_vertices)
        self.dirichlet_component_dofs = bv
        self.dirichlet_velocity_dofs = np.concatenate([bv, bv + self.n_component_dofs])
        free = np.ones(self.n_component_dofs, dtype=bool)
        free[bv] = False
        self.free_component_dofs = np.flatnonzero(free)
        self.free_velocity_dofs = np.concatenate(
            [self.free_component_dofs, self.free_component_dofs + self.n_component_dofs]
        )
        self._cache: dict = {}

    @property
    def quadrature(self):
        return triangle_quadrature(self.default_degree)

    @cached_property
    def areas(self) -> np.ndarray:
        return self.mesh.signed_areas()

    @cached_property
    def grad_lambda(self) -> np.ndarray:
        """Constant gradients of the barycentric coordinates, shape ``(nt, 3, 2)``."""
        p = self.mesh.vertices[self.mesh.triangles]
        two_a = 2.0 * self.areas
        g = np.empty((len(p), 3, 2))
        for a in range(3):
            b, c = (a + 1) % 3, (a + 2) % 3
            # rotate the opposite edge by -90 degrees
            g[:, a, 0] = (p[:, b, 1] - p[:, c, 1]) / two_a
            g[:, a, 1] = (p[:, c, 0] - p[:, b, 0]) / two_a
        return g

    @cached_property
    def vertex_weights(self) -> np.ndarray:
        """``int phi_i dx`` for every P1 basis function."""
        return np.bincount(
            self.mesh.triangles.ravel(),
            weights=np.repeat(self.areas / 3.0, 3),
            minlength=self.n_scalar_dofs,
        )

    def quad_points(self, degree: int) -> np.ndarray:
        """Physical quadrature points, shape ``(nt, nq, 2)``."""
        key = ("points", degree)
        if key not in self._cache:
            bary, _ = triangle_quadrature(degree)
            p = self.mesh.vertices[self.mesh.triangles]
            self._cache[key] = np.einsum("qa,tad->tqd", bary, p)
        return self._cache[key]

    def jxw(self, degree: int) -> np.ndarray:
        """Quadrature weights times element area, shape ``(nt, nq)``."""
        _, w = triangle_quadrature(degree)
        return self.areas[:, None] * w[None, :]

    def p1b_values(self, degree: int) -> np.ndarray:
        bary, _ = triangle_quadrature(degree)
        return np.column_stack([bary, bubble(bary)])

    def p1b_grads(self, degree: int) -> np.ndarray:
        """Gradients of the four local P1b functions, shape ``(nt, nq, 4, 2)``."""
        key = ("p1b_grads", degree)
        if key not in self._cache:
            bary, _ = triangle_quadrature(degree)
            gl = self.grad_lambda
            nt, nq = len(gl), len(bary)
            out = np.empty((nt, nq, 4, 2))
            out[:, :, :3, :] = gl[:, None, :, :]
            coef = np.column_stack(
                [bary[:, 1] * bary[:, 2], bary[:, 0] * bary[:, 2], bary[:, 0] * bary[:, 1]]
            )
            out[:, :, 3, :] = BUBBLE_SCALE * np.einsum("qa,tad->tqd", coef, gl)
            self._cache[key] = out
        return self._cache[key]

    def scalar_at_qp(self, coeffs: np.ndarray, degree: int) -> np.ndarray:
        """Values of a P1 field at quadrature points, shape ``(nt, nq)``."""
        bary, _ = triangle_quadrature(degree)
        return np.asarray(coeffs)[self.scalar_cell_dofs] @ bary.T

    def scalar_grad(self, coeffs: np.ndarray) -> np.ndarray:
        """Elementwise constant gradient of a P1 field, shape ``(nt, 2)``."""
        return np.einsum("ta,tad->td", np.asarray(coeffs)[self.scalar_cell_dofs], self.grad_lambda)

    def velocity_at_qp(self, coeffs: np.ndarray, degree: int) -> np.ndarray:
        """Values of a P1b vector field at quadrature points, shape ``(nt, nq, 2)``."""
        phi = self.p1b_values(degree)
        comps = self.split_velocity(coeffs)
        return np.stack([c[self.component_cell_dofs] @ phi.T for c in comps], axis=-1)

    def split_velocity(self, coeffs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        coeffs = np.asarray(coeffs)
        n = self.n_component_dofs
        return coeffs[:n], coeffs[n:]

    def integrate(self, values_qp: np.ndarray, degree: int) -> float:
        return float(np.sum(values_qp * self.jxw(degree)))

    def mean(self, coeffs: np.ndarray) -> float:
        return float(self.vertex_weights @ coeffs) / self.mesh.area

    def n_dofs(self, space: str) -> int:
        if space == VELOCITY:
            return self.n_velocity_dofs
        if space in (SCALAR, PRESSURE):
            return self.n_scalar_dofs
        raise ValueError(f"unknown space {space!r}")


@dataclass
class Field:
    """Coefficient vector tagged with the space it belongs to."""

    fe: FeSystem
    space: str
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        n = self.fe.n_dofs(self.space)
        if self.coeffs.shape != (n,):
            raise ValueError(f"{self.space} field needs {n} coefficients, got {self.coeffs.shape}")
        if self.space == PRESSURE:
            scale = max(float(np.max(np.abs(self.coeffs), initial=0.0)), 1e-300)
            integral = float(self.fe.vertex_weights @ self.coeffs)
            if abs(integral) > 1e-12 * self.fe.mesh.area * scale:
                raise ValueError(f"pressure field is not mean-zero (integral {integral:.3e})")


def eval_field(f: Field, x) -> np.ndarray:
    """Evaluate a finite element field at one point or an ``(n, 2)`` array of points."""
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    tri, lam = f.fe.mesh.locate(pts)
    verts = f.fe.mesh.triangles[tri]
    if f.space == VELOCITY:
        nv = f.fe.n_scalar_dofs
        b = bubble(lam)
        out = np.empty((len(tri), 2))
        for c, comp in enumerate(f.fe.split_velocity(f.coeffs)):
            out[:, c] = np.sum(lam * comp[verts], axis=1) + b * comp[nv + tri]
    else:
        out = np.sum(lam * f.coeffs[verts], axis=1)
    return out[0] if single else out


def interpolate(fe: FeSystem, space: str, g) -> Field:
    """Nodal interpolant of ``g(x, y)``.

    For velocity ``g`` returns the pair of components and bubble coefficients
    are set to zero; pressure interpolants are shifted to mean zero.
    """
    x, y = fe.mesh.vertices[:, 0], fe.mesh.vertices[:, 1]
    if space == VELOCITY:
        gx, gy = g(x, y)
        coeffs = np.zeros(fe.n_velocity_dofs)
        n = fe.n_component_dofs
        coeffs[: fe.n_scalar_dofs] = np.broadcast_to(gx, x.shape)
        coeffs[n : n + fe.n_scalar_dofs] = np.broadcast_to(gy, y.shape)
        return Field(fe, space, coeffs)
    vals = np.array(np.broadcast_to(g(x, y), x.shape), dtype=float)
    if space == PRESSURE:
        vals -= fe.mean(vals)
    return Field(fe, space, vals)
