"""Sparse operators for the fully discrete weak forms.

All element integrals are evaluated with quadrature rules that are exact for
the polynomial integrands involved, so the discrete energy identities of the
scheme hold to round-off.  Element blocks are scattered through a cached CSR
pattern with :func:`numpy.bincount`, which makes repeated assembly cheap and
bit-reproducible.

Velocity operators that act componentwise (mass, stiffness, convection) are
returned as ``block_diag(A, A)`` unless ``component=True`` asks for the
scalar block ``A``.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .fespace import SCALAR, VELOCITY, FeSystem, triangle_quadrature

# exactness degrees of the integrands
DEG_SCALAR = 4      # P1 quartic term, weighted P1 mass
DEG_VEL_MASS = 6    # bubble x bubble
DEG_VEL_STIFF = 4
DEG_CONVECTION = 8  # P1b advecting field x grad P1b x P1b
DEG_COUPLING = 4


def _pattern(fe: FeSystem, row_kind: str, col_kind: str):
    key = ("pattern", row_kind, col_kind)
    if key in fe._cache:
        return fe._cache[key]
    dofs = {"p1": (fe.scalar_cell_dofs, fe.n_scalar_dofs),
            "p1b": (fe.component_cell_dofs, fe.n_component_dofs)}
    rd, nr = dofs[row_kind]
    cd, nc = dofs[col_kind]
    rows = np.broadcast_to(rd[:, :, None], (len(rd), rd.shape[1], cd.shape[1])).ravel()
    cols = np.broadcast_to(cd[:, None, :], (len(cd), rd.shape[1], cd.shape[1])).ravel()
    keys = rows.astype(np.int64) * nc + cols
    uniq, inverse = np.unique(keys, return_inverse=True)
    indices = (uniq % nc).astype(np.int32)
    indptr = np.zeros(nr + 1, dtype=np.int64)
    np.cumsum(np.bincount(uniq // nc, minlength=nr), out=indptr[1:])
    pat = (inverse, indices, indptr, (nr, nc), len(uniq))
    fe._cache[key] = pat
    return pat


def scatter(fe: FeSystem, local: np.ndarray, row_kind: str, col_kind: str) -> sp.csr_matrix:
    """Sum element blocks ``local[t, a, b]`` into a global CSR matrix."""
    inverse, indices, indptr, shape, nnz = _pattern(fe, row_kind, col_kind)
    data = np.bincount(inverse, weights=local.ravel(), minlength=nnz)
    return sp.csr_matrix((data, indices.copy(), indptr.copy()), shape=shape)


def scatter_vector(fe: FeSystem, local: np.ndarray, kind: str = "p1") -> np.ndarray:
    if kind == "p1":
        return np.bincount(fe.scalar_cell_dofs.ravel(), weights=local.ravel(),
                           minlength=fe.n_scalar_dofs)
    return np.bincount(fe.component_cell_dofs.ravel(), weights=local.ravel(),
                       minlength=fe.n_component_dofs)


def _vector(block: sp.spmatrix, component: bool) -> sp.csr_matrix:
    return block if component else sp.block_diag((block, block), format="csr")


def assemble_weighted_mass(fe: FeSystem, coeff_qp: np.ndarray | None = None,
                           degree: int = DEG_SCALAR) -> sp.csr_matrix:
    """P1 mass matrix ``int c phi_j phi_i`` with ``c`` given at quadrature points."""
    bary, _ = triangle_quadrature(degree)
    jxw = fe.jxw(degree)
    if coeff_qp is not None:
        jxw = jxw * coeff_qp
    local = np.einsum("tq,qa,qb->tab", jxw, bary, bary)
    return scatter(fe, local, "p1", "p1")


def assemble_mass(fe: FeSystem, space: str = SCALAR, component: bool = False) -> sp.csr_matrix:
    """Consistent mass matrix of the scalar P1 or the vector P1b space."""
    key = ("mass", space, component)
    if key in fe._cache:
        return fe._cache[key]
    if space == VELOCITY:
        phi = fe.p1b_values(DEG_VEL_MASS)
        local = np.einsum("tq,qa,qb->tab", fe.jxw(DEG_VEL_MASS), phi, phi)
        mat = _vector(scatter(fe, local, "p1b", "p1b"), component)
    else:
        mat = assemble_weighted_mass(fe, None, 2)
    fe._cache[key] = mat
    return mat


def assemble_weighted_stiffness(fe: FeSystem, space: str = SCALAR, w=None, g=None,
                                component: bool = False) -> sp.csr_matrix:
    """Stiffness ``int g(w) grad phi_j . grad phi_i``.

    ``w`` holds P1 coefficients and ``g`` is a pointwise map evaluated at
    quadrature points; both ``None`` gives the plain Laplacian.  A
    nonpositive value of ``g`` is rejected since it cannot be a mobility.
    """
    plain = w is None and g is None
    key = ("stiffness", space, component)
    if plain and key in fe._cache:
        return fe._cache[key]
    if space == VELOCITY:
        if not plain:
            raise NotImplementedError("weighted stiffness is only needed on the scalar space")
        grads = fe.p1b_grads(DEG_VEL_STIFF)
        local = np.einsum("tq,tqad,tqbd->tab", fe.jxw(DEG_VEL_STIFF), grads, grads)
        mat = _vector(scatter(fe, local, "p1b", "p1b"), component)
    else:
        gl = fe.grad_lambda
        base = np.einsum("tad,tbd->tab", gl, gl)
        if plain:
            weight = fe.areas
        else:
            wq = fe.scalar_at_qp(w if w is not None else np.zeros(fe.n_scalar_dofs), DEG_SCALAR)
            gq = np.asarray(g(wq), dtype=float) * np.ones_like(wq)
            if np.any(gq <= 0.0):
                raise ValueError("weight function must be positive (invalid mobility)")
            weight = np.sum(gq * fe.jxw(DEG_SCALAR), axis=1)
        mat = scatter(fe, base * weight[:, None, None], "p1", "p1")
    if plain:
        fe._cache[key] = mat
    return mat


def convection_matrix(fe: FeSystem, w: np.ndarray) -> sp.csr_matrix:
    """Non-symmetrised advection block ``C_ij = int (w . grad psi_j) psi_i``."""
    deg = DEG_CONVECTION
    wq = fe.velocity_at_qp(w, deg)
    grads = fe.p1b_grads(deg)
    phi = fe.p1b_values(deg)
    adv = np.einsum("tqd,tqbd->tqb", wq, grads)
    local = np.einsum("tq,qa,tqb->tab", fe.jxw(deg), phi, adv)
    return scatter(fe, local, "p1b", "p1b")


def assemble_convection(fe: FeSystem, w: np.ndarray, component: bool = False) -> sp.csr_matrix:
    """Skew-symmetric trilinear form ``N(w)_ij = b(w, psi_j, psi_i)``.

    ``b(u, v, z) = 1/2 [(u . grad v, z) - (u . grad z, v)]``, hence
    ``N = (C - C^T) / 2`` is exactly skew whatever ``w`` is.
    """
    c = convection_matrix(fe, w)
    n = ((c - c.T) * 0.5).tocsr()
    return _vector(n, component)


def assemble_phase_coupling(fe: FeSystem, phi: np.ndarray | None) -> sp.csr_matrix:
    """``G(phi)`` with ``(G mu) . v = int phi grad(mu) . v``, shape ``(n_vel, n_scalar)``.

    The same matrix gives the capillary force in the momentum equation and,
    transposed, the advective flux ``(phi u, grad v)`` in the phase equation.
    ``phi=None`` means ``phi = 1``, which is the pressure gradient operator.
    """
    deg = DEG_COUPLING
    psi = fe.p1b_values(deg)
    jxw = fe.jxw(deg)
    if phi is not None:
        jxw = jxw * fe.scalar_at_qp(phi, deg)
    mom = np.einsum("tq,qa->ta", jxw, psi)
    blocks = []
    for d in range(2):
        local = mom[:, :, None] * fe.grad_lambda[:, None, :, d]
        blocks.append(scatter(fe, local, "p1b", "p1"))
    return sp.vstack(blocks, format="csr")


def assemble_pressure_gradient(fe: FeSystem) -> sp.csr_matrix:
    """``B_ij = int grad(q_j) . psi_i``; ``B^T u`` is ``-(div u, q)`` for ``u`` vanishing on the boundary."""
    key = ("pressure_gradient",)
    if key not in fe._cache:
        fe._cache[key] = assemble_phase_coupling(fe, None)
    return fe._cache[key]


def cubic_secant(fe: FeSystem, phi_new: np.ndarray, phi_old: np.ndarray):
    """Convex part of the chemical potential in secant (Crank-Nicolson) form.

    Returns the load ``1/4 int (phi_new^2 + phi_old^2)(phi_new + phi_old) v_i``
    and its Jacobian with respect to ``phi_new``.
    """
    bary, _ = triangle_quadrature(DEG_SCALAR)
    a = fe.scalar_at_qp(phi_new, DEG_SCALAR)
    b = fe.scalar_at_qp(phi_old, DEG_SCALAR)
    jxw = fe.jxw(DEG_SCALAR)
    load = scatter_vector(fe, (0.25 * (a * a + b * b) * (a + b) * jxw) @ bary)
    jac = assemble_weighted_mass(fe, 0.25 * (3.0 * a * a + 2.0 * a * b + b * b))
    return load, jac


def cubic_implicit(fe: FeSystem, phi: np.ndarray):
    """Load ``int phi^3 v_i`` and its Jacobian (first order convex splitting)."""
    bary, _ = triangle_quadrature(DEG_SCALAR)
    a = fe.scalar_at_qp(phi, DEG_SCALAR)
    load = scatter_vector(fe, (a ** 3 * fe.jxw(DEG_SCALAR)) @ bary)
    jac = assemble_weighted_mass(fe, 3.0 * a * a)
    return load, jac

