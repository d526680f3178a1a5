import numpy as np
import pytest
import scipy.sparse as sp

from chns import FeSystem, build_uniform_mesh, interpolate
from chns.assembly import assemble_mass, assemble_weighted_stiffness
from chns.fespace import SCALAR
from chns.linsolve import Factorization, LinearSystem, ResidualError, SingularSystemError, solve


def test_identity():
    b = np.arange(5.0)
    assert np.array_equal(solve(LinearSystem(sp.identity(5, format="csr"), b)), b)


def test_small_saddle():
    A = sp.csr_matrix([[1.0, 1.0], [1.0, 0.0]])
    assert np.allclose(solve(LinearSystem(A, np.array([2.0, 1.0]))), [1.0, 1.0], rtol=0, atol=1e-15)
    assert np.allclose(Factorization(A, saddle=True).solve(np.array([2.0, 1.0])), [1.0, 1.0])


def test_singular_is_reported():
    A = sp.csr_matrix([[1.0, 2.0], [2.0, 4.0]])
    with pytest.raises(SingularSystemError):
        solve(LinearSystem(A, np.array([1.0, 0.0])))


def test_residual_contract_raises():
    # a bound below round-off cannot be met
    rng = np.random.default_rng(0)
    A = sp.csr_matrix(rng.standard_normal((20, 20)))
    with pytest.raises(ResidualError):
        Factorization(A, rtol=1e-30, refine=0).solve(rng.standard_normal(20))


def test_non_square_rejected():
    with pytest.raises(ValueError):
        Factorization(sp.csr_matrix(np.ones((2, 3))))


def neumann_poisson(n):
    fe = FeSystem(build_uniform_mesh(n, n))
    exact = lambda x, y: np.cos(np.pi * x) * np.cos(np.pi * y)
    f = interpolate(fe, SCALAR, lambda x, y: 2 * np.pi**2 * exact(x, y)).coeffs
    rhs = assemble_mass(fe) @ f
    rhs -= fe.vertex_weights * (rhs.sum() / fe.mesh.area)
    K = assemble_weighted_stiffness(fe)
    u = solve(LinearSystem(K, rhs, constraint=fe.vertex_weights))
    r = K @ u - rhs
    assert np.linalg.norm(r) <= 1e-12 * np.linalg.norm(rhs)
    assert abs(fe.vertex_weights @ u) <= 1e-13
    e = u - interpolate(fe, SCALAR, exact).coeffs
    return np.sqrt(e @ (assemble_mass(fe) @ e))


def test_neumann_poisson_second_order():
    errs = [neumann_poisson(n) for n in (8, 16, 32, 64)]
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 1.8)


def test_deterministic():
    fe = FeSystem(build_uniform_mesh(8, 8))
    K = assemble_weighted_stiffness(fe) + assemble_mass(fe)
    b = np.random.default_rng(0).standard_normal(fe.n_scalar_dofs)
    assert np.array_equal(solve(LinearSystem(K, b)), solve(LinearSystem(K, b)))


def test_multiple_right_hand_sides():
    fe = FeSystem(build_uniform_mesh(4, 4))
    K = (assemble_weighted_stiffness(fe) + assemble_mass(fe)).tocsc()
    B = np.random.default_rng(1).standard_normal((fe.n_scalar_dofs, 3))
    X = Factorization(K).solve(B)
    assert np.allclose(K @ X, B, atol=1e-13)
