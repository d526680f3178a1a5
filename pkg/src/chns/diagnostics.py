"""Energies, mass, convergence tables, coarsening fits and the monotonicity probe."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .assembly import (DEG_CONVECTION, DEG_SCALAR, assemble_mass, assemble_pressure_gradient,
                       assemble_weighted_stiffness)
from .fespace import SCALAR, VELOCITY, FeSystem, bubble, triangle_quadrature

log = logging.getLogger(__name__)


@dataclass
class EnergyRecord:
    """Discrete energies of one time level.

    ``E_app`` uses the discrete pressure gradient (the L2 projection of
    ``grad p`` onto the velocity space), the quantity for which the modified
    energy law holds exactly at the fully discrete level; ``E_app_grad``
    carries the same functional with the pointwise gradient.  ``free_energy``
    is ``We* * surface``, the interfacial energy without the surface tension
    factor.
    """

    t: float
    kinetic: float
    surface: float
    E_ht: float
    E_app: float
    mass: float
    free_energy: float = 0.0
    E_app_grad: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def f0(phi):
    return 0.25 * (1.0 - phi * phi) ** 2


def free_energy(fe: FeSystem, phi: np.ndarray, epsilon: float) -> float:
    """``int f0(phi) / eps + eps/2 |grad phi|^2``, integrated exactly."""
    K = assemble_weighted_stiffness(fe, SCALAR)
    bulk = fe.integrate(f0(fe.scalar_at_qp(phi, DEG_SCALAR)), DEG_SCALAR)
    return bulk / epsilon + 0.5 * epsilon * float(phi @ (K @ phi))


def kinetic_energy(fe: FeSystem, u: np.ndarray) -> float:
    Mu = assemble_mass(fe, VELOCITY, component=True)
    ux, uy = fe.split_velocity(u)
    return 0.5 * float(ux @ (Mu @ ux) + uy @ (Mu @ uy))


def _free_mass_factor(fe: FeSystem):
    key = ("free_mass_factor",)
    if key not in fe._cache:
        Mu = assemble_mass(fe, VELOCITY, component=True)
        f = fe.free_component_dofs
        fe._cache[key] = spla.splu(Mu[f][:, f].tocsc())
    return fe._cache[key]


def discrete_gradient(fe: FeSystem, p: np.ndarray) -> np.ndarray:
    """L2 projection of ``grad p`` onto the velocity space with zero trace."""
    lu = _free_mass_factor(fe)
    B = assemble_pressure_gradient(fe)
    rhs = B @ p
    n = fe.n_component_dofs
    f = fe.free_component_dofs
    out = np.zeros(fe.n_velocity_dofs)
    out[f] = lu.solve(rhs[:n][f])
    out[n + f] = lu.solve(rhs[n:][f])
    return out


def discrete_gradient_norm2(fe: FeSystem, p: np.ndarray) -> float:
    g = discrete_gradient(fe, p)
    return 2.0 * kinetic_energy(fe, g)


def gradient_norm2(fe: FeSystem, p: np.ndarray) -> float:
    K = assemble_weighted_stiffness(fe, SCALAR)
    return float(p @ (K @ p))


def l2_norm2(fe: FeSystem, v: np.ndarray) -> float:
    M = assemble_mass(fe, SCALAR)
    return float(v @ (M @ v))


def compute_energies(state, phys, dt: float) -> EnergyRecord:
    """Energies of ``state`` (a :class:`~chns.stepper.SimState`)."""
    fe = state.fe
    kin = kinetic_energy(fe, state.u)
    free = free_energy(fe, state.phi, phys.epsilon)
    gamma = 1.0 / phys.We_star
    surface = gamma * free
    e_ht = kin + surface
    jump = gamma / (4.0 * phys.epsilon) * l2_norm2(fe, state.phi - state.phi_prev)
    if np.any(state.p):
        p_disc = dt * dt / 8.0 * discrete_gradient_norm2(fe, state.p)
        p_grad = dt * dt / 8.0 * gradient_norm2(fe, state.p)
    else:
        p_disc = p_grad = 0.0
    return EnergyRecord(
        t=state.t,
        kinetic=kin,
        surface=surface,
        E_ht=e_ht,
        E_app=e_ht + jump + p_disc,
        mass=float(fe.vertex_weights @ state.phi),
        free_energy=free,
        E_app_grad=e_ht + jump + p_grad,
    )


# --------------------------------------------------------------------------
# Cauchy convergence


@dataclass
class CauchyRow:
    variable: str
    levels: tuple
    error: float
    rate: float | None


def l2_difference(fine_fe: FeSystem, fine: np.ndarray, coarse_fe: FeSystem,
                  coarse: np.ndarray, space: str) -> float:
    """L2 norm of ``fine - coarse`` integrated on the fine mesh.

    The meshes must be nested, so the coarse field is a polynomial on every
    fine triangle and the degree 8 rule integrates the difference exactly.
    """
    deg = DEG_CONVECTION
    pts = fine_fe.quad_points(deg).reshape(-1, 2)
    tri, lam = coarse_fe.mesh.locate(pts)
    verts = coarse_fe.mesh.triangles[tri]
    jxw = fine_fe.jxw(deg)
    if space == VELOCITY:
        f_q = fine_fe.velocity_at_qp(fine, deg)
        b = bubble(lam)
        nv = coarse_fe.n_scalar_dofs
        total = 0.0
        for c, comp in enumerate(coarse_fe.split_velocity(coarse)):
            cq = (np.sum(lam * comp[verts], axis=1) + b * comp[nv + tri]).reshape(jxw.shape)
            total += float(np.sum((f_q[..., c] - cq) ** 2 * jxw))
        return math.sqrt(total)
    f_q = fine_fe.scalar_at_qp(fine, deg)
    cq = np.sum(lam * coarse[verts], axis=1).reshape(jxw.shape)
    return math.sqrt(float(np.sum((f_q - cq) ** 2 * jxw)))


def component_difference(fine_fe, fine, coarse_fe, coarse, component: int) -> float:
    """L2 difference of one velocity component (``0`` for u, ``1`` for v)."""
    keep = np.zeros(fine_fe.n_velocity_dofs)
    keepc = np.zeros(coarse_fe.n_velocity_dofs)
    nf, nc = fine_fe.n_component_dofs, coarse_fe.n_component_dofs
    sl_f = slice(component * nf, (component + 1) * nf)
    sl_c = slice(component * nc, (component + 1) * nc)
    keep[sl_f] = fine[sl_f]
    keepc[sl_c] = coarse[sl_c]
    return l2_difference(fine_fe, keep, coarse_fe, keepc, VELOCITY)


def cauchy_table(solutions: list) -> list[CauchyRow]:
    """Cauchy differences and rates from ``[(n, fe, state), ...]`` ordered coarse to fine."""
    rows: list[CauchyRow] = []
    errors: dict = {v: [] for v in ("phi", "u", "v", "p")}
    for (n0, fe0, s0), (n1, fe1, s1) in zip(solutions[:-1], solutions[1:]):
        errors["phi"].append(((n0, n1), l2_difference(fe1, s1.phi, fe0, s0.phi, SCALAR)))
        errors["u"].append(((n0, n1), component_difference(fe1, s1.u, fe0, s0.u, 0)))
        errors["v"].append(((n0, n1), component_difference(fe1, s1.u, fe0, s0.u, 1)))
        errors["p"].append(((n0, n1), l2_difference(fe1, s1.p, fe0, s0.p, SCALAR)))
    for var, errs in errors.items():
        for i, (lv, e) in enumerate(errs):
            rate = None
            if i > 0:
                prev = errs[i - 1][1]
                rate = math.log2(prev / e) if prev > 0 and e > 0 else float("nan")
                if e > prev:
                    warnings.warn(f"Cauchy difference of {var} increased at levels {lv}",
                                  RuntimeWarning, stacklevel=2)
            rows.append(CauchyRow(var, lv, e, rate))
    return rows


def cauchy_convergence(config, levels) -> list[CauchyRow]:
    """Run ``config`` (a convergence :class:`~chns.experiments.Scenario`) on each level.

    ``levels`` lists exponents ``n`` of ``2**n`` cells per direction.  The
    time step follows the refinement path ``dt ~ c * h`` with the step count
    doubling between levels, so every level ends exactly at ``config.T``.
    """
    from .experiments import run_convergence_level

    sols = []
    for n in levels:
        fe, state = run_convergence_level(config, n, min(levels))
        sols.append((n, fe, state))
    return cauchy_table(sols)


# --------------------------------------------------------------------------
# coarsening


def fit_coarsening_rate(t, energy, window=None) -> float:
    """Least-squares slope of ``log E`` against ``log t`` over ``window``.

    ``window`` defaults to the last decade ``[t_end / 10, t_end]``.
    """
    t = np.asarray(t, dtype=float)
    e = np.asarray(energy, dtype=float)
    if window is None:
        window = (t[-1] / 10.0, t[-1])
    ta, tb = window
    sel = (t >= ta) & (t <= tb) & (t > 0)
    if np.count_nonzero(sel) < 2:
        raise ValueError(f"coarsening window [{ta}, {tb}] holds fewer than two samples")
    if np.any(e[sel] <= 0):
        raise ValueError("energy must be positive on the fit window")
    slope, _ = np.polyfit(np.log(t[sel]), np.log(e[sel]), 1)
    return float(slope)


# --------------------------------------------------------------------------
# contour geometry of the zero level set


def zero_level_geometry(fe: FeSystem, phi: np.ndarray) -> tuple[float, float]:
    """Area of ``{phi > 0}`` and length of ``{phi = 0}`` for the P1 field ``phi``."""
    p = fe.mesh.vertices[fe.mesh.triangles]
    v = phi[fe.mesh.triangles]
    area = 0.0
    length = 0.0
    for tri_p, tri_v, a in zip(p, v, fe.areas):
        pos = tri_v > 0
        npos = int(pos.sum())
        if npos == 3:
            area += a
            continue
        if npos == 0:
            continue
        # single vertex on the minority side
        lone = int(np.flatnonzero(pos)[0] if npos == 1 else np.flatnonzero(~pos)[0])
        o1, o2 = (lone + 1) % 3, (lone + 2) % 3
        s1 = tri_v[lone] / (tri_v[lone] - tri_v[o1])
        s2 = tri_v[lone] / (tri_v[lone] - tri_v[o2])
        q1 = tri_p[lone] + s1 * (tri_p[o1] - tri_p[lone])
        q2 = tri_p[lone] + s2 * (tri_p[o2] - tri_p[lone])
        length += float(np.hypot(*(q1 - q2)))
        corner = s1 * s2 * a
        area += corner if npos == 1 else a - corner
    return area, length


def isoperimetric_ratio(fe: FeSystem, phi: np.ndarray) -> float:
    """``4 pi A / P^2`` of the region ``phi > 0``; equals 1 for a disc."""
    area, length = zero_level_geometry(fe, phi)
    return 4.0 * math.pi * area / length**2 if length > 0 else float("nan")


# --------------------------------------------------------------------------
# monotonicity of the reduced operator


def monotonicity_pairing(stepper, state, mu, nu) -> float:
    r"""``<T(mu) - T(nu), mu - nu>`` for the reduced chemical potential operator."""
    if mu is nu or np.array_equal(mu, nu):
        return 0.0
    return float((stepper.reduced_operator(state, mu) - stepper.reduced_operator(state, nu))
                 @ (mu - nu))


def monotonicity_probe(fe: FeSystem, state, phys, scheme, n_trials: int = 20, seed: int = 0,
                       return_all: bool = False):
    """Minimum of ``<T(mu) - T(nu), mu - nu> / |mu - nu|_{H1}^2`` over random pairs.

    Coefficients of ``mu`` and ``nu`` are i.i.d. uniform in ``[-1, 1]``.
    """
    from .stepper import CHNSStepper

    stepper = CHNSStepper(fe, phys, scheme)
    rng = np.random.default_rng(seed)
    M = assemble_mass(fe, SCALAR)
    K = assemble_weighted_stiffness(fe, SCALAR)
    values = []
    for _ in range(n_trials):
        mu = rng.uniform(-1.0, 1.0, fe.n_scalar_dofs)
        nu = rng.uniform(-1.0, 1.0, fe.n_scalar_dofs)
        d = mu - nu
        scale = float(d @ (M @ d) + d @ (K @ d))
        values.append(monotonicity_pairing(stepper, state, mu, nu) / scale)
    values = np.array(values)
    return (float(values.min()), values) if return_all else float(values.min())
