"""End-to-end drivers for the benchmark scenarios.

A :class:`Scenario` bundles physical and numerical parameters, the mesh,
the final time and the initial and boundary data.  :func:`run_scenario`
performs the first order startup followed by second order steps up to the
final time and collects energies, step reports and field snapshots.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .assembly import assemble_pressure_gradient, assemble_weighted_stiffness
from .diagnostics import EnergyRecord, compute_energies
from .fespace import SCALAR, VELOCITY, FeSystem, Field, interpolate
from .linsolve import Factorization
from .mesh import build_uniform_mesh
from .stepper import CHNSStepper, Mobility, PhysParams, SchemeParams, SimState, StepError, StepReport

log = logging.getLogger(__name__)

CONVERGENCE = "convergence"
ENERGY_MASS = "energy_mass"
RELAX_QUIESCENT = "relax_quiescent"
RELAX_SHEAR = "relax_shear"
SPINODAL = "spinodal"
COARSENING = "coarsening"
TAGS = (CONVERGENCE, ENERGY_MASS, RELAX_QUIESCENT, RELAX_SHEAR, SPINODAL, COARSENING)

# initial phase field kinds
IC_COSINE = "cosine"
IC_SQUARE = "square"
IC_RANDOM = "random"
IC_CONSTANT = "constant"
# initial velocity / boundary kinds
U_ZERO = "zero"
U_VORTEX = "vortex"
U_LID_STOKES = "lid_stokes"


class ResolutionWarning(UserWarning):
    """Fewer than four mesh cells across the diffuse interface."""


@dataclass(frozen=True)
class MeshSpec:
    nx: int
    ny: int
    lx: float = 1.0
    ly: float = 1.0

    def build(self):
        return build_uniform_mesh(self.nx, self.ny, domain=(self.lx, self.ly))

    @property
    def h(self) -> float:
        return math.hypot(self.lx / self.nx, self.ly / self.ny)


@dataclass(frozen=True)
class Scenario:
    """One run: parameters, mesh, final time, initial and boundary data.

    ``ic`` and ``bc`` are small dicts; ``ic["phi"]`` is one of ``cosine``,
    ``square``, ``random``, ``constant`` and ``ic["u"]`` one of ``zero``,
    ``vortex``, ``lid_stokes``.  ``bc["lid"]`` enables the moving lid
    ``u = (x (1 - x), 0)`` on the top side.
    """

    tag: str
    phys: PhysParams
    scheme: SchemeParams
    mesh: MeshSpec
    T: float
    ic: dict = field(default_factory=dict)
    bc: dict = field(default_factory=dict)
    seed: int | None = None
    frozen_velocity: bool = False
    snapshot_every: int = 0
    dt_factor: float = 0.1  # convergence path: dt = dt_factor * h

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown scenario tag {self.tag!r}")
        if not self.T > 0:
            raise ValueError("T > 0 required")
        if self.snapshot_every < 0:
            raise ValueError("snapshot_every >= 0 required")
        kind = self.ic.get("phi", IC_COSINE)
        if kind not in (IC_COSINE, IC_SQUARE, IC_RANDOM, IC_CONSTANT):
            raise ValueError(f"unknown phase field initial condition {kind!r}")
        if self.ic.get("u", U_ZERO) not in (U_ZERO, U_VORTEX, U_LID_STOKES):
            raise ValueError(f"unknown velocity initial condition {self.ic.get('u')!r}")
        if (self.tag in (SPINODAL, COARSENING) or kind == IC_RANDOM) and self.seed is None:
            raise ValueError("a seed is required for random initial data")

    @property
    def n_steps(self) -> int:
        return max(1, math.ceil(self.T / self.scheme.dt - 1e-9))


def default_scenario(tag: str) -> Scenario:
    """Desk-scale defaults for each tag (uniform meshes instead of adaptive ones)."""
    if tag == CONVERGENCE:
        return Scenario(tag, PhysParams(0.04, 100.0, 25.0, Mobility("constant", 0.1)),
                        SchemeParams(0.1 * math.sqrt(2) / 16), MeshSpec(16, 16), 0.1,
                        ic={"phi": IC_COSINE, "u": U_VORTEX})
    if tag == ENERGY_MASS:
        return Scenario(tag, PhysParams(0.04, 100.0, 25.0, Mobility("constant", 1.0)),
                        SchemeParams(0.005), MeshSpec(128, 128), 1.0,
                        ic={"phi": IC_COSINE, "u": U_VORTEX})
    if tag in (RELAX_QUIESCENT, RELAX_SHEAR):
        shear = tag == RELAX_SHEAR
        return Scenario(tag, PhysParams(0.02, 100.0 if shear else 10.0, 200.0,
                                        Mobility("regularized", 0.1)),
                        SchemeParams(0.005), MeshSpec(128, 128), 1.0,
                        ic={"phi": IC_SQUARE, "center": (0.5, 0.5), "half_width": 0.2,
                            "u": U_LID_STOKES if shear else U_ZERO},
                        bc={"lid": shear})
    if tag == SPINODAL:
        eps = 0.01
        return Scenario(tag, PhysParams(eps, 10.0, 1.0 / eps, Mobility("regularized", 0.1)),
                        SchemeParams(0.005), MeshSpec(128, 128), 10.0,
                        ic={"phi": IC_RANDOM, "mean": -0.05, "amplitude": 0.05}, seed=0)
    if tag == COARSENING:
        return Scenario(tag, PhysParams(1.0, 1.0, 1.0, Mobility("constant", 1.0)),
                        SchemeParams(0.5), MeshSpec(200, 200, 100.0, 100.0), 1000.0,
                        ic={"phi": IC_RANDOM, "mean": -0.05, "amplitude": 0.05}, seed=0)
    raise ValueError(f"unknown scenario tag {tag!r}")


# --------------------------------------------------------------------------
# initial data


def ic_square_shape(fe: FeSystem, center, half_width: float, epsilon: float) -> Field:
    """``tanh(d / (sqrt(2) eps))`` with ``d`` the signed distance to an axis aligned
    square, positive inside."""
    cx, cy = center
    m = fe.mesh
    if half_width <= 0:
        raise ValueError("half_width must be positive")
    if cx - half_width < 0 or cy - half_width < 0 or cx + half_width > m.lx \
            or cy + half_width > m.ly:
        raise ValueError("square lies outside the domain")

    def g(x, y):
        qx = np.abs(x - cx) - half_width
        qy = np.abs(y - cy) - half_width
        outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
        inside = np.minimum(np.maximum(qx, qy), 0.0)
        return np.tanh(-(outside + inside) / (math.sqrt(2.0) * epsilon))

    return interpolate(fe, SCALAR, g)


def ic_spinodal(fe: FeSystem, mean: float, r_max: float, seed: int) -> Field:
    """Vertex values ``mean + U(-r_max, r_max)`` from a seeded generator."""
    if r_max < 0:
        raise ValueError("amplitude must be nonnegative")
    if abs(mean) + r_max > 1.0:
        raise ValueError("|mean| + amplitude <= 1 required")
    rng = np.random.default_rng(seed)
    return Field(fe, SCALAR, mean + rng.uniform(-r_max, r_max, fe.n_scalar_dofs))


def ic_cosine(fe: FeSystem) -> Field:
    return interpolate(fe, SCALAR, lambda x, y: 0.24 * np.cos(2 * np.pi * x) * np.cos(2 * np.pi * y)
                       + 0.4 * np.cos(np.pi * x) * np.cos(3 * np.pi * y))


def ic_vortex(fe: FeSystem) -> Field:
    return interpolate(fe, VELOCITY, lambda x, y: (
        -np.sin(np.pi * x) ** 2 * np.sin(2 * np.pi * y),
        np.sin(np.pi * y) ** 2 * np.sin(2 * np.pi * x)))


def lid_profile(x):
    return x * (1.0 - x)


def lid_boundary_values(fe: FeSystem, g=lid_profile) -> np.ndarray:
    """Velocity vector that is ``(g(x), 0)`` on the top side and zero elsewhere."""
    m = fe.mesh
    out = np.zeros(fe.n_velocity_dofs)
    top = m.boundary_vertices[np.isclose(m.vertices[m.boundary_vertices, 1], m.ly)]
    out[top] = g(m.vertices[top, 0])
    return out


def ic_lid_driven_stokes(fe: FeSystem, g=lid_profile) -> Field:
    """Stationary Stokes flow in the cavity driven by the lid ``u = (g(x), 0)``.

    Uses the same P1-bubble / P1 pair as the time stepper; the pressure is
    fixed by a mean-zero multiplier and discarded.
    """
    K = assemble_weighted_stiffness(fe, VELOCITY).tocsr()
    B = assemble_pressure_gradient(fe)
    bc = lid_boundary_values(fe, g)
    fv = fe.free_velocity_dofs
    bv = fe.dirichlet_velocity_dofs
    A = sp.bmat([[K[fv][:, fv], B[fv]], [B[fv].T, None]], format="csc")
    rhs = np.concatenate([-(K[fv][:, bv] @ bc[bv]), -(B[bv].T @ bc[bv])])
    c = np.concatenate([np.zeros(len(fv)), fe.vertex_weights])
    if not np.any(rhs):
        return Field(fe, VELOCITY, bc)
    sol = Factorization(A, constraint=c, saddle=True).solve(rhs)
    u = bc.copy()
    u[fv] = sol[: len(fv)]
    return Field(fe, VELOCITY, u)


def check_resolution(mesh: MeshSpec, epsilon: float) -> bool:
    """Warn when fewer than four cells span the interface width ``sqrt(2) eps``."""
    if epsilon < 4.0 * mesh.h / math.sqrt(2.0):
        warnings.warn(f"epsilon={epsilon} resolves the interface with fewer than four cells "
                      f"(h={mesh.h:.4g}); need epsilon >= {4.0 * mesh.h / math.sqrt(2.0):.4g}",
                      ResolutionWarning, stacklevel=2)
        return False
    return True


def initial_state(s: Scenario, fe: FeSystem) -> tuple[SimState, np.ndarray | None]:
    """Level-0 state and the Dirichlet velocity data of ``s``."""
    ic = s.ic
    kind = ic.get("phi", IC_COSINE)
    if kind == IC_COSINE:
        phi = ic_cosine(fe).coeffs
    elif kind == IC_SQUARE:
        phi = ic_square_shape(fe, ic.get("center", (0.5 * s.mesh.lx, 0.5 * s.mesh.ly)),
                              ic.get("half_width", 0.2 * s.mesh.lx), s.phys.epsilon).coeffs
    elif kind == IC_RANDOM:
        phi = ic_spinodal(fe, ic.get("mean", -0.05), ic.get("amplitude", 0.05), s.seed).coeffs
    else:
        phi = np.full(fe.n_scalar_dofs, float(ic.get("value", 1.0)))
    ukind = ic.get("u", U_ZERO)
    bc = lid_boundary_values(fe) if s.bc.get("lid") else None
    if s.frozen_velocity:
        u = None
    elif ukind == U_VORTEX:
        u = ic_vortex(fe).coeffs
    elif ukind == U_LID_STOKES:
        u = ic_lid_driven_stokes(fe).coeffs
    else:
        u = None if bc is None else bc.copy()
    return SimState.initial(fe, phi, u), bc


# --------------------------------------------------------------------------
# runs


@dataclass
class RunResult:
    scenario: Scenario
    fe: FeSystem
    state: SimState
    energies: list[EnergyRecord]
    reports: list[StepReport]
    snapshots: list[SimState]


def run_scenario(s: Scenario, callback=None, n_steps: int | None = None) -> RunResult:
    """Startup, then second order steps until ``s.T`` (or ``n_steps`` steps).

    ``energies`` starts with the initial record; ``reports`` has one entry per
    second order step.  Snapshots are taken every ``s.snapshot_every`` steps
    (and at the end) when the cadence is positive.  ``callback(state, report)``
    sees the initial state and every step, with ``report=None`` for the
    first two levels.
    """
    check_resolution(s.mesh, s.phys.epsilon)
    fe = FeSystem(s.mesh.build())
    state, bc = initial_state(s, fe)
    stepper = CHNSStepper(fe, s.phys, s.scheme, velocity_bc=bc, frozen_velocity=s.frozen_velocity)
    n = s.n_steps if n_steps is None else n_steps
    dt = s.scheme.dt
    energies = [compute_energies(state, s.phys, dt)]
    reports: list[StepReport] = []
    snaps: list[SimState] = []
    every = s.snapshot_every
    if every:
        snaps.append(state.copy())
    if callback is not None:
        callback(state, None)
    try:
        state = stepper.startup(state)
    except StepError as exc:
        raise StepError(exc.k, f"t={state.t + dt:.6g}: {exc}") from exc
    energies.append(compute_energies(state, s.phys, dt))
    if callback is not None:
        callback(state, None)
    if every and state.k % every == 0:
        snaps.append(state.copy())
    for _ in range(n - 1):
        try:
            state, rep = stepper.advance(state)
        except StepError as exc:
            raise StepError(exc.k, f"t={state.t + dt:.6g}: {exc}") from exc
        reports.append(rep)
        energies.append(rep.energy)
        if callback is not None:
            callback(state, rep)
        if every and state.k % every == 0:
            snaps.append(state.copy())
        log.debug("step %d t=%.5g E_app=%.10g picard=%d", rep.k, rep.t, rep.energy.E_app,
                  rep.picard_iters)
    if every and (not snaps or snaps[-1].k != state.k):
        snaps.append(state.copy())
    return RunResult(s, fe, state, energies, reports, snaps)


def convergence_steps(config: Scenario, n: int, nmin: int) -> int:
    """Step count on level ``n``: ``ceil(T / (c h))`` on the coarsest level, doubled per level."""
    h0 = math.hypot(config.mesh.lx, config.mesh.ly) / 2**nmin
    n0 = math.ceil(config.T / (config.dt_factor * h0) - 1e-9)
    return n0 * 2 ** (n - nmin)


def run_convergence_level(config: Scenario, n: int, nmin: int):
    """Run ``config`` on a ``2**n`` mesh with the refinement-path time step.

    Returns ``(fe, final_state)``.
    """
    steps = convergence_steps(config, n, nmin)
    mesh = replace(config.mesh, nx=2**n, ny=2**n)
    s = replace(config, mesh=mesh, scheme=replace(config.scheme, dt=config.T / steps))
    res = run_scenario(s)
    return res.fe, res.state
