"""Time stepping for the matched-density Cahn-Hilliard-Navier-Stokes system.

One step of the second order scheme:

1. Picard iteration on the half-step velocity ``ubar``.  Each sweep solves
   the Cahn-Hilliard pair ``(phi^{k+1}, mu^{k+1/2})`` by Newton's method with
   ``ubar`` frozen in the advective flux, then the linear momentum equation
   for ``ubar`` with ``mu`` frozen in the capillary force.
2. Projection of ``ubar^{k+1} = 2 ubar^{k+1/2} - u^k`` onto discretely
   divergence-free fields, either through the coupled Darcy saddle problem
   or through a pressure Poisson equation followed by an L2 update.

The scheme needs two history levels; :meth:`CHNSStepper.startup` produces
level 1 from level 0 with a first order convex-splitting / backward Euler /
incremental projection step that reuses the same machinery.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import diagnostics
from .assembly import (assemble_convection, assemble_mass, assemble_phase_coupling,
                       assemble_pressure_gradient, assemble_weighted_stiffness, cubic_implicit,
                       cubic_secant)
from .fespace import SCALAR, VELOCITY, FeSystem
from .linsolve import Factorization

log = logging.getLogger(__name__)

DARCY = "darcy"
POISSON = "poisson"
PROJECTIONS = (DARCY, POISSON)

# below this L2 norm a velocity iterate counts as zero in the Picard test
PICARD_FLOOR = 1e-12
# refactor the Newton Jacobian when a chord step contracts the residual less than this
CHORD_RATIO = 0.1


class StepError(RuntimeError):
    """A time step failed; ``k`` is the step index being computed."""

    def __init__(self, k: int, message: str):
        super().__init__(f"step {k}: {message}")
        self.k = k


class StartupStateError(ValueError):
    pass


class NewtonDivergenceError(RuntimeError):
    pass


class PicardNonConvergenceError(RuntimeError):
    def __init__(self, iterations: int, increment: float):
        super().__init__(f"Picard iteration did not converge in {iterations} sweeps "
                         f"(last relative increment {increment:.3e})")
        self.iterations = iterations
        self.increment = increment


@dataclass(frozen=True)
class Mobility:
    """``constant``: ``M = value``; ``regularized``: ``M = value * sqrt((1 - phi^2)^2 + eps^2)``."""

    kind: str = "constant"
    value: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "regularized"):
            raise ValueError(f"unknown mobility kind {self.kind!r}")
        if not self.value > 0:
            raise ValueError("mobility value must be > 0")

    def __call__(self, phi, epsilon: float):
        phi = np.asarray(phi, dtype=float)
        if self.kind == "constant":
            return np.full_like(phi, self.value)
        return self.value * np.sqrt((1.0 - phi * phi) ** 2 + epsilon * epsilon)

    def lower_bound(self, epsilon: float) -> float:
        return self.value if self.kind == "constant" else self.value * epsilon


@dataclass(frozen=True)
class PhysParams:
    epsilon: float
    Re: float
    We_star: float
    mobility: Mobility = Mobility()

    def __post_init__(self):
        for name in ("epsilon", "Re", "We_star"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} > 0 required")

    @property
    def coupling(self) -> float:
        """Capillary force coefficient ``1 / (eps We*)``."""
        return 1.0 / (self.epsilon * self.We_star)


@dataclass(frozen=True)
class SchemeParams:
    dt: float
    picard_tol: float = 1e-8
    picard_max: int = 50
    newton_tol: float = 1e-10
    newton_max: int = 30
    projection: str = DARCY

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt > 0 required")
        for name in ("picard_tol", "newton_tol"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        for name in ("picard_max", "newton_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} >= 1 required")
        if self.projection not in PROJECTIONS:
            raise ValueError(f"projection must be one of {PROJECTIONS}")


@dataclass
class SimState:
    """Two time levels of the discrete fields plus the last chemical potential."""

    fe: FeSystem
    phi: np.ndarray
    phi_prev: np.ndarray
    u: np.ndarray
    u_prev: np.ndarray
    p: np.ndarray
    mu: np.ndarray
    k: int = 0
    t: float = 0.0

    @classmethod
    def initial(cls, fe: FeSystem, phi0, u0=None, t0: float = 0.0) -> "SimState":
        phi0 = np.array(phi0, dtype=float)
        u0 = np.zeros(fe.n_velocity_dofs) if u0 is None else np.array(u0, dtype=float)
        return cls(fe, phi0, phi0.copy(), u0, u0.copy(), np.zeros(fe.n_scalar_dofs),
                   np.zeros(fe.n_scalar_dofs), 0, t0)

    def copy(self) -> "SimState":
        return replace(self, phi=self.phi.copy(), phi_prev=self.phi_prev.copy(), u=self.u.copy(),
                       u_prev=self.u_prev.copy(), p=self.p.copy(), mu=self.mu.copy())


@dataclass
class StepReport:
    k: int
    t: float
    picard_iters: int
    newton_iters: int
    picard_increment: float
    energy: diagnostics.EnergyRecord
    dissipation: dict = field(default_factory=dict)
    energy_change: float = 0.0
    energy_identity_residual: float = 0.0
    projection_identity_residual: float = 0.0
    projection_identity_residual_grad: float = 0.0
    projection_jump: float = 0.0  # 1/2 |u^{k+1} - u_bar^{k+1}|^2
    mass_change: float = 0.0


def extrapolate_half(state: SimState) -> tuple[np.ndarray, np.ndarray]:
    """Adams-Bashforth values ``(3 f^k - f^{k-1}) / 2`` of phi and u."""
    if state.k < 1:
        raise StartupStateError("extrapolation needs two time levels (k >= 1); run startup first")
    return 1.5 * state.phi - 0.5 * state.phi_prev, 1.5 * state.u - 0.5 * state.u_prev


@dataclass
class _StepOps:
    """Operators frozen during one time step."""

    order: int
    phi_adv: np.ndarray       # phase field in the advective flux and capillary force
    phi_expl: np.ndarray      # explicit concave part of the chemical potential
    K_mob: sp.csr_matrix
    G: sp.csr_matrix
    ns_factor: Factorization | None = None
    ns_matrix: sp.csr_matrix | None = None
    ch_factor: Factorization | None = None


class CHNSStepper:
    """Fully discrete CHNS stepper on a fixed :class:`FeSystem`.

    ``velocity_bc`` is a velocity coefficient vector whose entries on the
    boundary vertex dofs give the (time independent) Dirichlet data; zero by
    default.  ``frozen_velocity`` skips the flow solve entirely (pure
    Cahn-Hilliard with ``u = 0``).
    """

    def __init__(self, fe: FeSystem, phys: PhysParams, scheme: SchemeParams,
                 velocity_bc: np.ndarray | None = None, frozen_velocity: bool = False):
        self.fe = fe
        self.phys = phys
        self.scheme = scheme
        self.frozen_velocity = frozen_velocity
        self.M = assemble_mass(fe, SCALAR)
        self.K = assemble_weighted_stiffness(fe, SCALAR)
        self.Mu = assemble_mass(fe, VELOCITY, component=True)
        self.Ku = assemble_weighted_stiffness(fe, VELOCITY, component=True)
        self.B = assemble_pressure_gradient(fe)
        self.m = fe.vertex_weights
        bc = np.zeros(fe.n_velocity_dofs)
        if velocity_bc is not None:
            bc[fe.dirichlet_velocity_dofs] = np.asarray(velocity_bc)[fe.dirichlet_velocity_dofs]
        self.velocity_bc = bc
        self._projection_factors: dict = {}

    # ------------------------------------------------------------------ helpers
    @property
    def dt(self) -> float:
        return self.scheme.dt

    def _free(self):
        return self.fe.free_component_dofs

    def _bnd(self):
        return self.fe.dirichlet_component_dofs

    def _ops(self, state: SimState, order: int) -> _StepOps:
        if order == 2:
            phi_t, _ = extrapolate_half(state)
            phi_adv = phi_expl = phi_t
        else:
            phi_adv = phi_expl = state.phi
        mob = self.phys.mobility
        K_mob = assemble_weighted_stiffness(
            self.fe, SCALAR, w=phi_adv, g=lambda x: mob(x, self.phys.epsilon))
        G = assemble_phase_coupling(self.fe, phi_adv)
        return _StepOps(order, phi_adv, phi_expl, K_mob, G)

    def _velocity_norm(self, u: np.ndarray) -> float:
        return math.sqrt(2.0 * diagnostics.kinetic_energy(self.fe, u))

    # ------------------------------------------------------------- Cahn-Hilliard
    def _ch_residual(self, state, ops, phi, mu, ubar, with_jacobian=True):
        dt, eps = self.dt, self.phys.epsilon
        M, K = self.M, self.K
        if ops.order == 2:
            conv, jconv = cubic_secant(self.fe, phi, state.phi)
            c_lap, lap = 0.5 * eps * eps, phi + state.phi
        else:
            conv, jconv = cubic_implicit(self.fe, phi)
            c_lap, lap = eps * eps, phi
        r1 = M @ (phi - state.phi) + dt * (ops.K_mob @ mu)
        if ubar is not None:
            r1 -= dt * (ops.G.T @ ubar)
        r2 = M @ mu - conv + M @ ops.phi_expl - c_lap * (K @ lap)
        if not with_jacobian:
            return r1, r2, None
        jac = sp.bmat([[M, dt * ops.K_mob], [-(jconv + c_lap * K), M]], format="csc")
        return r1, r2, jac

    def ch_newton_step(self, state: SimState, ubar, ops: _StepOps | None = None,
                       guess: tuple | None = None):
        """Solve the Cahn-Hilliard pair for a frozen velocity ``ubar``.

        Newton's method in chord form: the Jacobian factor is kept on ``ops``
        for the whole time step and rebuilt at the current iterate whenever
        the residual contracts by less than ``CHORD_RATIO``.  The stopping
        test is on the true residual, so the converged pair is the same as
        for exact Newton.  Returns ``(phi_new, mu, newton_iterations)``.
        """
        if ops is None:
            ops = self._ops(state, 2 if state.k >= 1 else 1)
        n = self.fe.n_scalar_dofs
        phi, mu = (state.phi.copy(), state.mu.copy()) if guess is None else \
            (guess[0].copy(), guess[1].copy())
        tol, nmax = self.scheme.newton_tol, self.scheme.newton_max
        ref = None
        prev = math.inf
        for it in range(nmax + 1):
            r1, r2, _ = self._ch_residual(state, ops, phi, mu, ubar, with_jacobian=False)
            rnorm = math.hypot(np.linalg.norm(r1), np.linalg.norm(r2))
            if ref is None:
                ref = max(rnorm, np.linalg.norm(self.M @ state.phi))
            if rnorm <= tol * ref:
                return phi, mu, it
            if it == nmax or not math.isfinite(rnorm):
                break
            if ops.ch_factor is None or rnorm > CHORD_RATIO * prev:
                _, _, jac = self._ch_residual(state, ops, phi, mu, ubar)
                ops.ch_factor = Factorization(jac, rtol=1e-8)
            prev = rnorm
            delta = ops.ch_factor.solve(-np.concatenate([r1, r2]))
            phi += delta[:n]
            mu += delta[n:]
        raise NewtonDivergenceError(
            f"Newton did not reach relative residual {tol:.1e} in {nmax} iterations "
            f"(last {rnorm / ref if ref else rnorm:.3e})")

    # ------------------------------------------------------------ Navier-Stokes
    def _ns_operator(self, state: SimState, ops: _StepOps):
        if ops.ns_factor is not None:
            return ops.ns_factor
        dt, Re = self.dt, self.phys.Re
        if ops.order == 2:
            _, u_t = extrapolate_half(state)
            A = 2.0 * self.Mu + (dt / Re) * self.Ku + dt * assemble_convection(self.fe, u_t, True)
        else:
            A = self.Mu + (dt / Re) * self.Ku + dt * assemble_convection(self.fe, state.u, True)
        A = A.tocsr()
        f = self._free()
        ops.ns_matrix = A
        ops.ns_factor = Factorization(A[f][:, f])
        return ops.ns_factor

    def ns_viscous_step(self, state: SimState, mu: np.ndarray, ops: _StepOps | None = None):
        """Momentum solve for the intermediate velocity with ``mu`` frozen.

        Second order: unknown ``ubar^{k+1/2}`` of
        ``2 M w + dt/Re K w + dt N(u~) w = 2 M u^k - dt B p^k - dt/(eps We*) G(phi~) mu``.
        First order: ``M w + dt/Re K w + dt N(u^k) w = M u^k - dt B p^k - ...``.
        """
        if ops is None:
            ops = self._ops(state, 2 if state.k >= 1 else 1)
        lu = self._ns_operator(state, ops)
        A = ops.ns_matrix
        dt = self.dt
        a = 2.0 if ops.order == 2 else 1.0
        force = dt * (self.B @ state.p) + dt * self.phys.coupling * (ops.G @ mu)
        ux, uy = self.fe.split_velocity(state.u)
        fx, fy = self.fe.split_velocity(force)
        gx, gy = self.fe.split_velocity(self.velocity_bc)
        f, b = self._free(), self._bnd()
        out = self.velocity_bc.copy()
        wx, wy = self.fe.split_velocity(out)  # views into out
        Afb = A[f][:, b]
        rhs = np.column_stack([
            a * (self.Mu @ ux)[f] - fx[f] - Afb @ gx[b],
            a * (self.Mu @ uy)[f] - fy[f] - Afb @ gy[b],
        ])
        sol = lu.solve(rhs)
        wx[f] = sol[:, 0]
        wy[f] = sol[:, 1]
        return out

    # ---------------------------------------------------------------- Picard
    def picard_solve(self, state: SimState, ops: _StepOps | None = None):
        """Picard sweeps until the relative L2 change of ``ubar`` is below ``picard_tol``.

        Returns ``(phi_new, mu, ubar, picard_iterations, newton_iterations, increment)``.
        """
        if ops is None:
            ops = self._ops(state, 2 if state.k >= 1 else 1)
        if self.frozen_velocity:
            phi, mu, nit = self.ch_newton_step(state, None, ops)
            return phi, mu, np.zeros(self.fe.n_velocity_dofs), 1, nit, 0.0
        if ops.order == 2:
            _, ubar = extrapolate_half(state)
            ubar = ubar.copy()
            ubar[self.fe.dirichlet_velocity_dofs] = self.velocity_bc[self.fe.dirichlet_velocity_dofs]
        else:
            ubar = state.u.copy()
        guess = None
        newton_total = 0
        incr = math.inf
        for it in range(1, self.scheme.picard_max + 1):
            phi, mu, nit = self.ch_newton_step(state, ubar, ops, guess)
            newton_total += nit
            guess = (phi, mu)
            new = self.ns_viscous_step(state, mu, ops)
            diff = self._velocity_norm(new - ubar)
            incr = diff / max(self._velocity_norm(new), PICARD_FLOOR)
            ubar = new
            if incr <= self.scheme.picard_tol or diff <= PICARD_FLOOR:
                return phi, mu, ubar, it, newton_total, incr
        raise PicardNonConvergenceError(self.scheme.picard_max, incr)

    # ------------------------------------------------------------- projection
    def _full_intermediate(self, state, ubar, order):
        return 2.0 * ubar - state.u if order == 2 else ubar

    def _darcy_factor(self, cp: float) -> Factorization:
        key = (DARCY, cp)
        if key not in self._projection_factors:
            f = self._free()
            n = self.fe.n_component_dofs
            fv = np.concatenate([f, n + f])
            Mff = sp.block_diag((self.Mu[f][:, f], self.Mu[f][:, f]))
            Bf = self.B[fv]
            K = sp.bmat([[Mff, cp * Bf], [cp * Bf.T, None]], format="csc")
            c = np.concatenate([np.zeros(len(fv)), self.m])
            self._projection_factors[key] = Factorization(K, constraint=c, saddle=True)
        return self._projection_factors[key]

    def _poisson_factors(self, cp: float):
        key = (POISSON, cp)
        if key not in self._projection_factors:
            f = self._free()
            self._projection_factors[key] = (
                Factorization(self.K, constraint=self.m),
                Factorization(self.Mu[f][:, f]),
            )
        return self._projection_factors[key]

    def projection_darcy(self, ubar_full: np.ndarray, state: SimState, cp: float):
        """Coupled Darcy projection.

        Finds ``u`` with ``(u - ubar, v) + cp (grad dp, v) = 0`` for interior
        test velocities and ``(div u, q) = 0`` for all P1 ``q``; ``dp`` has
        mean zero.  ``cp`` is ``dt/2`` in the second order scheme.
        Returns ``(u_new, p_new)``.
        """
        fe = self.fe
        f, b = self._free(), self._bnd()
        n = fe.n_component_dofs
        fv = np.concatenate([f, n + f])
        bv = np.concatenate([b, n + b])
        g = self.velocity_bc
        Mfull = sp.block_diag((self.Mu, self.Mu), format="csr")
        rhs_u = (Mfull @ ubar_full)[fv] - (Mfull[fv][:, bv] @ g[bv])
        rhs_p = -cp * (self.B[bv].T @ g[bv])
        sol = self._darcy_factor(cp).solve(np.concatenate([rhs_u, rhs_p]))
        u_new = g.copy()
        u_new[fv] = sol[: len(fv)]
        dp = sol[len(fv):]
        dp -= fe.mean(dp)
        return u_new, state.p + dp

    def projection_poisson(self, ubar_full: np.ndarray, state: SimState, cp: float):
        """Approximate projection: Neumann Poisson problem for the pressure
        increment, then an L2 update of the velocity."""
        fe = self.fe
        f = self._free()
        poisson, mass = self._poisson_factors(cp)
        dp = poisson.solve((self.B.T @ ubar_full) / cp)
        dp -= fe.mean(dp)
        g = self.velocity_bc
        u_new = g.copy()
        ux, uy = fe.split_velocity(u_new)
        rhs = self.B @ (cp * dp)
        b = self._bnd()
        for c, (uc, wc, rc, gc) in enumerate(zip((ux, uy), fe.split_velocity(ubar_full),
                                                    fe.split_velocity(rhs), fe.split_velocity(g))):
            r = (self.Mu @ wc)[f] - rc[f] - self.Mu[f][:, b] @ gc[b]
            uc[f] = mass.solve(r)
        return u_new, state.p + dp

    def _project(self, ubar_full, state, order):
        cp = 0.5 * self.dt if order == 2 else self.dt
        if self.scheme.projection == DARCY:
            return self.projection_darcy(ubar_full, state, cp)
        return self.projection_poisson(ubar_full, state, cp)

    # ------------------------------------------------------------ full steps
    def _step(self, state: SimState, order: int):
        ops = self._ops(state, order)
        phi, mu, ubar, pit, nit, incr = self.picard_solve(state, ops)
        if self.frozen_velocity:
            u_new, p_new, ubar_full = ubar, state.p.copy(), ubar
        else:
            ubar_full = self._full_intermediate(state, ubar, order)
            u_new, p_new = self._project(ubar_full, state, order)
        new = SimState(self.fe, phi, state.phi.copy(), u_new, state.u.copy(), p_new, mu,
                       state.k + 1, state.t + self.dt)
        return new, ops, ubar, ubar_full, pit, nit, incr

    def startup(self, state0: SimState) -> SimState:
        """First order step from level 0 to level 1 (``phi^0`` kept as the previous level)."""
        if state0.k != 0:
            raise StartupStateError("startup expects a level-0 state")
        try:
            new, *_ = self._step(state0, order=1)
        except (NewtonDivergenceError, PicardNonConvergenceError, np.linalg.LinAlgError) as exc:
            raise StepError(1, str(exc)) from exc
        return new

    def advance(self, state: SimState) -> tuple[SimState, StepReport]:
        """One second order step ``k -> k+1`` with full diagnostics."""
        if state.k < 1:
            raise StartupStateError("advance needs k >= 1; call startup first")
        try:
            new, ops, ubar, ubar_full, pit, nit, incr = self._step(state, order=2)
        except (NewtonDivergenceError, PicardNonConvergenceError, np.linalg.LinAlgError) as exc:
            raise StepError(state.k + 1, str(exc)) from exc
        return new, self.report(state, new, ops, ubar, ubar_full, pit, nit, incr)

    def report(self, old, new, ops, ubar, ubar_full, pit, nit, incr) -> StepReport:
        fe, phys, dt = self.fe, self.phys, self.dt
        gamma_eps = phys.coupling
        e_old = diagnostics.compute_energies(old, phys, dt)
        e_new = diagnostics.compute_energies(new, phys, dt)
        mu = new.mu
        curv = new.phi - 2.0 * old.phi + old.phi_prev
        diss = {
            "mobility": dt * gamma_eps * float(mu @ (ops.K_mob @ mu)),
            "viscous": dt / phys.Re * _stiffness_norm2(self, ubar),
            "phase_jump": gamma_eps / 4.0 * diagnostics.l2_norm2(fe, curv),
        }
        change = e_new.E_app - e_old.E_app
        resid = change + sum(diss.values())
        jump = 2.0 * diagnostics.kinetic_energy(fe, new.u - ubar_full)
        dp = new.p - old.p
        proj = dt * dt / 8.0 * diagnostics.discrete_gradient_norm2(fe, dp) - 0.5 * jump
        proj_grad = dt * dt / 8.0 * diagnostics.gradient_norm2(fe, dp) - 0.5 * jump
        return StepReport(
            k=new.k, t=new.t, picard_iters=pit, newton_iters=nit, picard_increment=incr,
            energy=e_new, dissipation=diss, energy_change=change,
            energy_identity_residual=resid, projection_identity_residual=proj,
            projection_identity_residual_grad=proj_grad, projection_jump=0.5 * jump,
            mass_change=e_new.mass - e_old.mass,
        )

    # ----------------------------------------------------- reduced operator
    def reduced_operator(self, state: SimState, mu: np.ndarray) -> np.ndarray:
        """Dual vector of ``T(mu)``: ``(phi(mu) - phi^k, v) + dt (M grad mu, grad v)
        - dt (phi~ ubar(mu), grad v)`` for every P1 basis function ``v``.

        ``phi(mu)`` solves the chemical potential equation for the given
        ``mu`` and ``ubar(mu)`` the momentum equation with that capillary force.
        """
        ops = self._ops(state, 2)
        phi = self._phi_of_mu(state, ops, mu)
        ubar = self.ns_viscous_step(state, mu, ops)
        return self.M @ (phi - state.phi) + self.dt * (ops.K_mob @ mu) - self.dt * (ops.G.T @ ubar)

    def _phi_of_mu(self, state, ops, mu):
        phi = state.phi.copy()
        eps = self.phys.epsilon
        ref = None
        for _ in range(self.scheme.newton_max):
            conv, jconv = cubic_secant(self.fe, phi, state.phi)
            r = conv - self.M @ ops.phi_expl + 0.5 * eps * eps * (self.K @ (phi + state.phi)) \
                - self.M @ mu
            rn = np.linalg.norm(r)
            ref = rn if ref is None else ref
            if rn <= self.scheme.newton_tol * max(ref, 1e-300):
                return phi
            phi -= Factorization(jconv + 0.5 * eps * eps * self.K, rtol=1e-8).solve(r)
        raise NewtonDivergenceError("chemical potential solve did not converge")


def _stiffness_norm2(stepper: CHNSStepper, u: np.ndarray) -> float:
    ux, uy = stepper.fe.split_velocity(u)
    return float(ux @ (stepper.Ku @ ux) + uy @ (stepper.Ku @ uy))


def run(stepper: CHNSStepper, state0: SimState, n_steps: int, callback=None):
    """Startup plus ``n_steps - 1`` second order steps; returns final state and reports."""
    state = stepper.startup(state0)
    reports = []
    if callback is not None:
        callback(state, None)
    for _ in range(n_steps - 1):
        state, rep = stepper.advance(state)
        reports.append(rep)
        if callback is not None:
            callback(state, rep)
    return state, reports
