# simulator/stepper.py - Euler-Maruyama integration of the truncated Galerkin system
#
# Momentum form: q = M[rho] u is advanced with drift and noise, the density is
# transported with the pre-step velocity, and u is recovered as M^-1[rho'] q'.

import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import TYPE_CHECKING, Optional, Tuple

import numpy as np

from simulator.basis import (
    Basis,
    Domain,
    build_basis,
    gradient_norm_sq,
    project,
    reconstruct,
    sine_table,
    solenoidal_projector,
)
from simulator.errors import (
    CFLViolationError,
    ContractionError,
    NegativeDensityError,
    PositivityError,
    ShapeMismatchError,
)
from simulator.galerkin import (
    MassOp,
    SimParams,
    cutoff_theta,
    induction_rhs,
    mass_op,
    momentum_rhs,
    viscous_part,
)
from simulator.noise import (
    BrownianPaths,
    NoiseModel,
    NoiseSettings,
    build_noise_model,
    eval_f,
    eval_g,
    sample_brownian,
    velocity_projection,
)
from simulator.transport import DensityField, advance_density, density_field

if TYPE_CHECKING:
    from simulator.config import InitialData, RunConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class State:
    t: float
    rho: DensityField
    u: np.ndarray
    B: np.ndarray
    stopped: Optional[float] = None
    theta: float = 1.0
    noise_sum: Optional[np.ndarray] = None

    @property
    def is_stopped(self) -> bool:
        return self.stopped is not None

    def l2_norm(self) -> float:
        return float(math.sqrt(np.sum(self.u**2) + np.sum(self.B**2)))

    def stochastic_norm(self) -> float:
        return 0.0 if self.noise_sum is None else float(np.linalg.norm(self.noise_sum))


@dataclass(frozen=True, eq=False)
class StepRecord:
    """Per-step increments kept for the energy budget and martingale statistics.

    ito_* are realized second-order terms (1/2 |M^-1/2 dM|^2), *_expected their
    compensators (1/2 theta^2 dt sum |.|^2), *_full the same with unprojected fields.
    """

    theta: float
    dM1: np.ndarray
    dM2: np.ndarray
    ito_f: float
    ito_f_expected: float
    ito_f_full: float
    ito_g: float
    ito_g_expected: float
    ito_g_full: float
    mart: float
    dissipation: float
    artificial: float
    qv_f: np.ndarray
    qv_g: np.ndarray
    massop: Optional[MassOp] = field(default=None, repr=False)


@dataclass(eq=False)
class Trajectory:
    seed: int
    dt: float
    times: np.ndarray
    rho: np.ndarray
    u: np.ndarray
    B: np.ndarray
    theta: np.ndarray
    dM1: np.ndarray
    dM2: np.ndarray
    ito_f: np.ndarray
    ito_f_expected: np.ndarray
    ito_f_full: np.ndarray
    ito_g: np.ndarray
    ito_g_expected: np.ndarray
    ito_g_full: np.ndarray
    mart: np.ndarray
    dissipation: np.ndarray
    artificial: np.ndarray
    qv_f: np.ndarray
    qv_g: np.ndarray
    mass: np.ndarray
    final_state: State
    stopped_at: Optional[float] = None
    abort_reason: Optional[str] = None

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    @property
    def aborted(self) -> bool:
        return self.abort_reason is not None

    @property
    def tau(self) -> float:
        return float(self.times[-1]) if self.stopped_at is None else self.stopped_at

    def stochastic_integrals(self) -> Tuple[np.ndarray, np.ndarray]:
        """Running sums of dM1, dM2 with a leading zero row: shape (steps + 1, n*d)."""
        zero = np.zeros((1, self.dM1.shape[1]))
        return (
            np.concatenate([zero, np.cumsum(self.dM1, axis=0)]),
            np.concatenate([zero, np.cumsum(self.dM2, axis=0)]),
        )


@lru_cache(maxsize=16)
def cached_basis(domain: Domain, n_per_axis: int) -> Basis:
    return build_basis(domain, n_per_axis)


@lru_cache(maxsize=16)
def cached_noise_model(domain: Domain, K: int, gamma: float, settings: NoiseSettings) -> NoiseModel:
    return build_noise_model(domain, K, gamma, settings)


def setup(config: "RunConfig") -> Tuple[Basis, NoiseModel]:
    basis = cached_basis(config.domain, config.n_per_axis)
    noise = cached_noise_model(config.domain, config.params.K_modes, config.params.gamma, config.noise_settings)
    return basis, noise


# Initial data

def mode_field(domain: Domain, k: Tuple[int, ...]) -> np.ndarray:
    """Normalized Dirichlet eigenfunction phi_k on the grid (any k, not only modes of X_n)."""
    out = None
    for a in range(domain.dim):
        row = sine_table(k[a], domain.lengths[a], domain.centers(a))[-1]
        out = row if out is None else np.multiply.outer(out, row)
    return out


def _low_modes(dim: int):
    return [(1,) * dim] + [tuple(2 if b == a else 1 for b in range(dim)) for a in range(dim - 1)]


def initial_fields(domain: Domain, init: "InitialData") -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Grid fields (rho0, m0 = rho0 u0, B0) of the default smooth initial data."""
    mesh = domain.mesh()
    bump = np.ones(domain.grid_shape)
    for a in range(domain.dim):
        bump = bump * np.cos(np.pi * mesh[a] / domain.lengths[a])
    rho0 = init.rho_mean + init.rho_amplitude * bump
    low = _low_modes(domain.dim)
    u0 = np.stack([init.u_amplitude * mode_field(domain, k) for k in low])
    B_modes = [tuple(reversed(low[(a + 1) % domain.dim])) for a in range(domain.dim)]
    B0 = np.stack([init.B_amplitude * mode_field(domain, k) for k in B_modes])
    return rho0, rho0 * u0, B0


def regularize_initial_data(
    rho0: np.ndarray, m0: np.ndarray, delta: float, beta: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Clip rho0 into [delta, delta^(-1/beta)] and rescale m0 by sqrt(rho_delta / rho0) (0 on vacuum)."""
    rho0 = np.asarray(rho0, dtype=float)
    if np.any(rho0 < 0):
        raise NegativeDensityError("initial density must be nonnegative")
    if delta <= 0:
        return rho0.copy(), np.array(m0, dtype=float)
    upper = delta ** (-1.0 / beta)
    rho_delta = np.clip(rho0, delta, upper)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(rho0 > 0, np.sqrt(rho_delta / rho0), 0.0)
    return rho_delta, np.asarray(m0, dtype=float) * scale


def initial_state(config: "RunConfig", basis: Basis) -> State:
    rho0, m0, B0 = initial_fields(config.domain, config.initial)
    rho, m = regularize_initial_data(rho0, m0, config.params.delta, config.params.beta)
    rho_field = density_field(rho, config.domain)
    # velocity coefficients from the projected momentum: M[rho] u0 = P(m0)
    u = mass_op(rho, basis).solve(project(m, basis))
    B = project(B0, basis)
    if config.params.project_B:
        B = solenoidal_projector(basis) @ B
    return State(t=0.0, rho=rho_field, u=u, B=B, noise_sum=np.zeros(2 * basis.coeff_len))


# Time stepping

def viscous_dissipation_rate(u: np.ndarray, B: np.ndarray, params: SimParams, basis: Basis) -> float:
    """mu |grad u|^2 + (lambda + mu) |div u|^2 + nu |grad B|^2, exact pairing with the drift."""
    return float(-u @ viscous_part(u, params, basis)) + params.nu * gradient_norm_sq(B, basis)


def artificial_dissipation_rate(rho: np.ndarray, params: SimParams, domain: Domain) -> float:
    """eps int P''(rho) |grad rho|^2 with face differences and face-averaged P''."""
    if params.eps == 0.0:
        return 0.0
    total = 0.0
    for a in range(domain.dim):
        diff = np.diff(rho, axis=a) / domain.spacing[a]
        lo = np.take(rho, np.arange(rho.shape[a] - 1), axis=a)
        hi = np.take(rho, np.arange(1, rho.shape[a]), axis=a)
        avg = 0.5 * (lo + hi)
        p2 = params.a * params.gamma * avg ** (params.gamma - 2) + params.delta * params.beta * avg ** (params.beta - 2)
        total += float(np.sum(p2 * diff**2))
    return params.eps * total * domain.cell_volume


def em_step(
    state: State,
    params: SimParams,
    basis: Basis,
    noise: NoiseModel,
    dW: np.ndarray,
    dt: float,
    massop: Optional[MassOp] = None,
    freeze_density: bool = False,
) -> Tuple[State, StepRecord]:
    """One Euler-Maruyama step; `massop` may carry M[rho_t] from the previous step."""
    if state.is_stopped:
        raise ValueError("cannot advance a stopped state")
    dW = np.asarray(dW, dtype=float)
    if dW.shape != (2, noise.K):
        raise ShapeMismatchError(f"expected increments of shape (2, {noise.K}), got {dW.shape}")

    rho = state.rho.values
    u, B = state.u, state.B
    M = massop if massop is not None else mass_op(rho, basis)
    theta = cutoff_theta(u, B, params.N_cutoff, basis) if params.use_cutoff else 1.0

    u_grid = reconstruct(u, basis)
    B_grid = reconstruct(B, basis)
    f = eval_f(rho, rho * u_grid, noise)
    g = eval_g(B_grid, noise)
    p = velocity_projection(rho, f, basis)
    fn = M.apply_sqrt(p)
    gp = project(g, basis)

    dM1 = theta * (dW[0] @ fn)
    dM2 = theta * (dW[1] @ gp)
    q_new = M.apply(u) + dt * theta * momentum_rhs(rho, u, B, params, basis) + dM1
    B_new = B + dt * theta * induction_rhs(u, B, params, basis) + dM2
    if params.project_B:
        B_new = solenoidal_projector(basis) @ B_new

    if freeze_density:
        rho_new, M_new = state.rho, M
    else:
        rho_new = advance_density(state.rho, u, params.eps, dt, basis, params.c_cfl)
        if rho_new.min <= 0:
            raise PositivityError(f"density lost positivity at t={state.t + dt:.4g} (min rho = {rho_new.min:.3e})")
        M_new = mass_op(rho_new.values, basis)
    u_new = M_new.solve(q_new)

    w = basis.weight
    factor = 0.5 * theta**2 * dt
    record = StepRecord(
        theta=theta,
        dM1=dM1,
        dM2=dM2,
        ito_f=0.5 * float(dM1 @ M.solve(dM1)),
        ito_f_expected=factor * float(np.sum(p**2)),
        ito_f_full=factor * float(np.sum(f**2 / rho) * w),
        ito_g=0.5 * float(dM2 @ dM2),
        ito_g_expected=factor * float(np.sum(gp**2)),
        ito_g_full=factor * float(np.sum(g**2) * w),
        mart=float(u @ dM1 + B @ dM2),
        dissipation=theta * dt * viscous_dissipation_rate(u, B, params, basis),
        artificial=dt * artificial_dissipation_rate(rho_new.values, params, basis.domain),
        qv_f=theta**2 * dt * (fn.T @ fn),
        qv_g=theta**2 * dt * (gp.T @ gp),
        massop=M_new,
    )
    noise_sum = np.concatenate([dM1, dM2])
    if state.noise_sum is not None:
        noise_sum = noise_sum + state.noise_sum
    new_state = State(
        t=state.t + dt, rho=rho_new, u=u_new, B=B_new, stopped=None, theta=theta, noise_sum=noise_sum
    )
    logger.debug("t=%.4f theta=%.3f |u|=%.3e |B|=%.3e", new_state.t, theta, np.linalg.norm(u_new), np.linalg.norm(B_new))
    return new_state, record


def update_stopping(state: State, N: float) -> State:
    """Stop at the current time once |(u, B)|_L2 >= N or the accumulated stochastic integral reaches N."""
    if state.is_stopped:
        return state
    if state.l2_norm() >= N or state.stochastic_norm() >= N:
        logger.debug("stopping time reached at t=%.4f (N=%g)", state.t, N)
        return replace(state, stopped=state.t)
    return state


def run_path(
    config: "RunConfig",
    seed: int,
    brownian: Optional[BrownianPaths] = None,
    keep_density: bool = True,
) -> Trajectory:
    """Integrate one path on [0, T]; positivity or CFL failures end the path with `abort_reason` set."""
    basis, noise = setup(config)
    params = config.params
    dt = config.dt
    steps = config.steps
    if brownian is None:
        brownian = sample_brownian(seed, params.K_modes, config.T, dt)
    elif brownian.K != params.K_modes or brownian.steps != steps or not math.isclose(brownian.dt, dt):
        raise ShapeMismatchError(
            f"Brownian increments (K={brownian.K}, steps={brownian.steps}, dt={brownian.dt}) do not match the run"
        )

    state = initial_state(config, basis)
    nd = basis.coeff_len
    grid = basis.grid_shape
    rho_hist = np.empty((steps + 1,) + grid) if keep_density else np.empty((0,) + grid)
    u_hist = np.empty((steps + 1, nd))
    B_hist = np.empty((steps + 1, nd))
    mass = np.empty(steps + 1)
    scalars = {
        key: np.zeros(steps)
        for key in (
            "theta", "ito_f", "ito_f_expected", "ito_f_full", "ito_g", "ito_g_expected",
            "ito_g_full", "mart", "dissipation", "artificial",
        )
    }
    dM1 = np.zeros((steps, nd))
    dM2 = np.zeros((steps, nd))
    qv_f = np.zeros((nd, nd))
    qv_g = np.zeros((nd, nd))

    def store(i: int, s: State) -> None:
        if keep_density:
            rho_hist[i] = s.rho.values
        u_hist[i] = s.u
        B_hist[i] = s.B
        mass[i] = s.rho.mass

    store(0, state)
    massop = None
    abort_reason = None
    completed = steps
    for i in range(steps):
        state = update_stopping(state, params.N_stop)
        if state.is_stopped:
            state = replace(state, t=(i + 1) * dt)
            scalars["theta"][i] = state.theta
            store(i + 1, state)
            continue
        try:
            state, record = em_step(state, params, basis, noise, brownian.step(i), dt, massop=massop)
        except (PositivityError, CFLViolationError, NegativeDensityError) as exc:
            abort_reason = exc.detail
            completed = i
            logger.warning("path seed=%d aborted at step %d: %s", seed, i, exc.detail)
            break
        massop = record.massop
        for key in scalars:
            scalars[key][i] = getattr(record, key)
        dM1[i] = record.dM1
        dM2[i] = record.dM2
        qv_f += record.qv_f
        qv_g += record.qv_g
        store(i + 1, state)

    cut = completed + 1
    return Trajectory(
        seed=seed,
        dt=dt,
        times=np.arange(cut) * dt,
        rho=rho_hist[:cut] if keep_density else rho_hist,
        u=u_hist[:cut],
        B=B_hist[:cut],
        dM1=dM1[:completed],
        dM2=dM2[:completed],
        qv_f=qv_f,
        qv_g=qv_g,
        mass=mass[:cut],
        final_state=state,
        stopped_at=state.stopped,
        abort_reason=abort_reason,
        **{key: value[:completed] for key, value in scalars.items()},
    )


@dataclass(frozen=True)
class FixedPointResult:
    state: State
    iterations: int
    kappa: float


def fixed_point_substep(
    state: State,
    params: SimParams,
    basis: Basis,
    dt: float,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> FixedPointResult:
    """Implicit deterministic step by Picard iteration on (u', B').

    rho' = S[u_t] is computed once; the drift is evaluated at (rho', u_k, B_k).
    kappa is the last ratio of successive Picard increments.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    rho = state.rho
    theta = cutoff_theta(state.u, state.B, params.N_cutoff, basis) if params.use_cutoff else 1.0
    rho_new = advance_density(rho, state.u, params.eps, dt, basis, params.c_cfl)
    if rho_new.min <= 0:
        raise PositivityError(f"density lost positivity (min rho = {rho_new.min:.3e})")
    q = mass_op(rho.values, basis).apply(state.u)
    M_new = mass_op(rho_new.values, basis)

    def sweep(u: np.ndarray, B: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        u_next = M_new.solve(q + dt * theta * momentum_rhs(rho_new.values, u, B, params, basis))
        B_next = state.B + dt * theta * induction_rhs(u, B, params, basis)
        return u_next, B_next

    u, B = state.u, state.B
    previous = None
    kappa = 0.0
    for iteration in range(1, max_iter + 1):
        u_next, B_next = sweep(u, B)
        increment = math.sqrt(float(np.sum((u_next - u) ** 2) + np.sum((B_next - B) ** 2)))
        size = math.sqrt(float(np.sum(u_next**2) + np.sum(B_next**2)))
        if previous is not None and previous > 0:
            kappa = increment / previous
            if kappa >= 1.0:
                raise ContractionError(kappa, dt)
        u, B = u_next, B_next
        if increment <= tol * max(size, 1e-300) or increment == 0.0:
            new_state = State(
                t=state.t + dt, rho=rho_new, u=u, B=B, theta=theta, noise_sum=state.noise_sum
            )
            return FixedPointResult(state=new_state, iterations=iteration, kappa=kappa)
        previous = increment
    raise ContractionError(kappa if kappa > 0 else 1.0, dt)
