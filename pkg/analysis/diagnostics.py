# analysis/diagnostics.py - Energy budget, martingale statistics and a-priori estimate checks

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse.linalg import splu

from simulator.basis import (
    Basis,
    Domain,
    reconstruct,
    solenoidal_projector,
    spectral_derivatives,
    weak_divergence_matrix,
)
from simulator.errors import (
    InadmissibleExponentError,
    InsufficientPathsError,
    NonZeroMeanError,
    ScheduleError,
    ShapeMismatchError,
)
from simulator.galerkin import SimParams
from simulator.noise import path_seed
from simulator.stepper import State, Trajectory, run_path, setup
from simulator.transport import (
    discrete_divergence,
    face_velocities,
    flux_divergence,
    neumann_laplacian,
    upwind_fluxes,
)

logger = logging.getLogger(__name__)

DEFAULT_C_ENERGY = 10.0
Z_THRESHOLD = 4.0
MIN_MARTINGALE_PATHS = 50


def _grid_axes(arr: np.ndarray, dim: int) -> Tuple[int, ...]:
    return tuple(range(arr.ndim - dim, arr.ndim))


# Energy budget

@dataclass
class EnergyReport:
    """Energy functional and the cumulative terms of its Ito balance, per grid time.

    residual = E + D + A - E(0) - I - Mart, with I the realized second-order noise
    terms. `ito_expected` holds their compensators and `ito_bound` the unprojected
    Ito corrections 1/2 int sum |f_k|^2/rho + 1/2 int sum |g_k|^2.
    """

    times: np.ndarray
    kinetic: np.ndarray
    potential: np.ndarray
    magnetic: np.ndarray
    dissipation: np.ndarray
    artificial: np.ndarray
    ito: np.ndarray
    ito_expected: np.ndarray
    ito_bound: np.ndarray
    mart: np.ndarray

    @property
    def energy(self) -> np.ndarray:
        return self.kinetic + self.potential + self.magnetic

    @property
    def residual(self) -> np.ndarray:
        return self.energy + self.dissipation + self.artificial - self.energy[0] - self.ito - self.mart

    @property
    def sup_energy(self) -> float:
        return float(np.max(self.energy))

    @property
    def final_residual(self) -> float:
        return float(self.residual[-1])

    @property
    def max_abs_residual(self) -> float:
        return float(np.max(np.abs(self.residual)))

    def nondecreasing(self) -> Dict[str, bool]:
        return {
            name: bool(np.all(np.diff(getattr(self, name)) >= 0))
            for name in ("dissipation", "artificial", "ito", "ito_expected", "ito_bound")
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "t": self.times,
                "energy": self.energy,
                "kinetic": self.kinetic,
                "potential": self.potential,
                "magnetic": self.magnetic,
                "dissipation": self.dissipation,
                "artificial": self.artificial,
                "ito": self.ito,
                "ito_expected": self.ito_expected,
                "ito_bound": self.ito_bound,
                "mart": self.mart,
                "residual": self.residual,
            }
        )


def _cumulative(increments: np.ndarray) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(increments)])


def energy_terms(rho: np.ndarray, u: np.ndarray, B: np.ndarray, params: SimParams, basis: Basis):
    """(kinetic, potential, magnetic) for batched states rho (..., *grid), u and B (..., n*d)."""
    w = basis.weight
    d = basis.vector_dim
    u_grid = reconstruct(u, basis)
    rho_b = np.expand_dims(rho, axis=rho.ndim - d)
    kinetic = 0.5 * np.sum(rho_b * u_grid**2, axis=_grid_axes(u_grid, d + 1)) * w
    potential = np.sum(params.pressure_potential(rho), axis=_grid_axes(rho, d)) * w
    magnetic = 0.5 * np.sum(np.asarray(B) ** 2, axis=-1)
    return kinetic, potential, magnetic


def energy_report(traj: Trajectory, params: SimParams, basis: Basis) -> EnergyReport:
    if traj.rho.shape[0] != len(traj.times):
        raise ValueError("energy report needs the density history (run with keep_density=True)")
    kinetic, potential, magnetic = energy_terms(traj.rho, traj.u, traj.B, params, basis)
    return EnergyReport(
        times=traj.times,
        kinetic=kinetic,
        potential=potential,
        magnetic=magnetic,
        dissipation=_cumulative(traj.dissipation),
        artificial=_cumulative(traj.artificial),
        ito=_cumulative(traj.ito_f + traj.ito_g),
        ito_expected=_cumulative(traj.ito_f_expected + traj.ito_g_expected),
        ito_bound=_cumulative(traj.ito_f_full + traj.ito_g_full),
        mart=_cumulative(traj.mart),
    )


def tol_energy(dt: float, sup_energy: float, c_energy: float = DEFAULT_C_ENERGY) -> float:
    return c_energy * dt * (1.0 + abs(sup_energy))


# Martingale structure

@dataclass(frozen=True)
class MartingaleSample:
    """Terminal stochastic integrals and their accumulated compensators for one path."""

    M1: np.ndarray
    M2: np.ndarray
    qv_f: np.ndarray
    qv_g: np.ndarray


def martingale_sample(traj: Trajectory) -> MartingaleSample:
    nd = traj.u.shape[1]
    M1 = traj.dM1.sum(axis=0) if len(traj.dM1) else np.zeros(nd)
    M2 = traj.dM2.sum(axis=0) if len(traj.dM2) else np.zeros(nd)
    return MartingaleSample(M1=M1, M2=M2, qv_f=traj.qv_f, qv_g=traj.qv_g)


@dataclass(frozen=True)
class MartingaleTest:
    direction: int
    z: Dict[str, float]
    paths: int
    threshold: float = Z_THRESHOLD

    @property
    def passed(self) -> bool:
        return all(abs(v) <= self.threshold for v in self.z.values())

    def as_rows(self) -> List[dict]:
        return [
            {"name": f"martingale_{key}_e{self.direction}", "statistic": value,
             "threshold": self.threshold, "passed": abs(value) <= self.threshold}
            for key, value in self.z.items()
        ]


def z_score(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=float)
    mean = float(np.mean(values))
    sd = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    if sd == 0.0:
        return 0.0 if mean == 0.0 else math.copysign(math.inf, mean)
    return mean / (sd / math.sqrt(len(values)))


def unit_direction(length: int, index: int) -> np.ndarray:
    e = np.zeros(length)
    e[index] = 1.0
    return e


def martingale_qv_test(
    samples: Sequence[Union[Trajectory, MartingaleSample]],
    direction: Union[int, np.ndarray],
    min_paths: int = MIN_MARTINGALE_PATHS,
) -> MartingaleTest:
    """z-scores of E<M1,phi>, E[<M1,phi>^2 - QV], the same for M2, and E[<M1,phi><M2,phi>]."""
    samples = [s if isinstance(s, MartingaleSample) else martingale_sample(s) for s in samples]
    if len(samples) < min_paths:
        raise InsufficientPathsError(f"martingale test needs at least {min_paths} paths, got {len(samples)}")
    nd = samples[0].M1.shape[0]
    index = direction if isinstance(direction, (int, np.integer)) else -1
    phi = unit_direction(nd, int(direction)) if index >= 0 else np.asarray(direction, dtype=float)
    if phi.shape != (nd,):
        raise ShapeMismatchError(f"test direction must have {nd} entries")
    x1 = np.array([s.M1 @ phi for s in samples])
    x2 = np.array([s.M2 @ phi for s in samples])
    c1 = np.array([phi @ s.qv_f @ phi for s in samples])
    c2 = np.array([phi @ s.qv_g @ phi for s in samples])
    z = {
        "mean_f": z_score(x1),
        "qv_f": z_score(x1**2 - c1),
        "mean_g": z_score(x2),
        "qv_g": z_score(x2**2 - c2),
        "cross": z_score(x1 * x2),
    }
    return MartingaleTest(direction=int(index), z=z, paths=len(samples))


# Bogovskii operator
#
# Discrete Stokes problem on the staggered grid,
#     -Laplace(v) + grad(p) = 0,   div v = f,   v = 0 on the boundary,
# with v_a stored on the interior faces normal to axis a (the boundary normal faces
# are zero) and mirrored ghosts for the tangential components.

@dataclass(frozen=True)
class BogovskiiResult:
    """`v` at the cell centres and `faces` the staggered components, boundary faces included.

    `residual` is the relative defect of the cell divergence of `faces`;
    `boundary_residual` the largest tangential trace, extrapolated to second order
    from the two nearest interior values, relative to max |v|.
    """

    v: np.ndarray
    faces: Tuple[np.ndarray, ...]
    residual: float
    boundary_residual: float


def _kron_axes(ops: Sequence[sparse.spmatrix]) -> sparse.csc_matrix:
    out = sparse.identity(1, format="csc")
    for op in ops:
        out = sparse.kron(out, op, format="csc")
    return out


def _second_difference(size: int, h: float, wall_ghost: bool) -> sparse.csc_matrix:
    """1-D Dirichlet second difference; with `wall_ghost` the wall sits half a cell outside the end nodes."""
    main = -2.0 * np.ones(size)
    if wall_ghost:
        main[0] = main[-1] = -3.0
    return sparse.diags([np.ones(size - 1), main, np.ones(size - 1)], [-1, 0, 1], format="csc") / h**2


def staggered_shape(domain: Domain, axis: int) -> Tuple[int, ...]:
    """Interior faces normal to `axis`."""
    return tuple(g - 1 if b == axis else g for b, g in enumerate(domain.grid_pts))


@lru_cache(maxsize=8)
def _stokes_solver(domain: Domain):
    d = domain.dim
    grid = domain.grid_pts
    h = domain.spacing
    div_blocks, stiffness_blocks = [], []
    for a in range(d):
        diff = sparse.diags(
            [np.ones(grid[a] - 1), -np.ones(grid[a] - 1)], [0, -1], shape=(grid[a], grid[a] - 1)
        ) / h[a]
        div_blocks.append(_kron_axes([diff if b == a else sparse.identity(grid[b]) for b in range(d)]))
        shape = staggered_shape(domain, a)
        lap = None
        for b in range(d):
            op = _second_difference(shape[b], h[b], wall_ghost=b != a)
            term = _kron_axes([op if c == b else sparse.identity(shape[c]) for c in range(d)])
            lap = term if lap is None else lap + term
        stiffness_blocks.append(-lap)
    D = sparse.hstack(div_blocks, format="csc")
    A = sparse.block_diag(stiffness_blocks, format="csc")
    # the bordering row pins the pressure constant
    ones = sparse.csc_matrix(np.ones((D.shape[0], 1)))
    system = sparse.bmat([[A, D.T, None], [D, None, ones], [None, ones.T, None]], format="csc")
    logger.debug("bogovskii: factorizing %d x %d staggered Stokes system", *system.shape)
    return splu(system), D.shape[1]


def _tangential_trace(faces: Sequence[np.ndarray], dim: int) -> float:
    trace = 0.0
    for a, full in enumerate(faces):
        for b in range(dim):
            if b == a:
                continue
            for first, second in ((0, 1), (-1, -2)):
                edge = 1.5 * np.take(full, first, axis=b) - 0.5 * np.take(full, second, axis=b)
                trace = max(trace, float(np.max(np.abs(edge))))
    return trace


def bogovskii_solve(f: np.ndarray, domain: Domain) -> BogovskiiResult:
    """v with div v = f in the cells and v = 0 on the boundary (staggered Stokes solve)."""
    f = np.asarray(f, dtype=float)
    if f.shape != domain.grid_shape:
        raise ShapeMismatchError(f"f has shape {f.shape}, expected {domain.grid_shape}")
    w = domain.cell_volume
    total = float(np.sum(f) * w)
    scale = float(np.sum(np.abs(f)) * w)
    if abs(total) > 1e-10 * scale:
        raise NonZeroMeanError(f"Bogovskii operator needs mean-zero data (int f = {total:.3e})")
    d = domain.dim
    if scale == 0.0:
        faces = tuple(np.zeros(tuple(g + (b == a) for b, g in enumerate(domain.grid_pts))) for a in range(d))
        return BogovskiiResult(v=np.zeros((d,) + domain.grid_shape), faces=faces, residual=0.0, boundary_residual=0.0)

    solver, unknowns = _stokes_solver(domain)
    solution = solver.solve(np.concatenate([np.zeros(unknowns), f.ravel(), [0.0]]))

    faces = []
    v = np.zeros((d,) + domain.grid_shape)
    offset = 0
    for a in range(d):
        shape = staggered_shape(domain, a)
        size = int(np.prod(shape))
        pad = [(0, 0)] * d
        pad[a] = (1, 1)
        full = np.pad(solution[offset:offset + size].reshape(shape), pad)
        offset += size
        g = domain.grid_pts[a]
        v[a] = 0.5 * (np.take(full, np.arange(g), axis=a) + np.take(full, np.arange(1, g + 1), axis=a))
        faces.append(full)

    residual = float(np.linalg.norm(flux_divergence(faces, domain) - f) / np.linalg.norm(f))
    boundary = _tangential_trace(faces, d) / float(np.max(np.abs(v)))
    logger.debug("bogovskii: div residual %.2e, boundary residual %.2e", residual, boundary)
    return BogovskiiResult(v=v, faces=tuple(faces), residual=residual, boundary_residual=boundary)


def grid_h1_norm(v: np.ndarray, domain: Domain) -> float:
    """Discrete H1 norm of a grid (vector) field using centred differences."""
    comps = v.reshape((-1,) + domain.grid_shape)
    total = np.sum(comps**2)
    for comp in comps:
        for g in np.gradient(comp, *domain.spacing):
            total += np.sum(g**2)
    return float(math.sqrt(total * domain.cell_volume))


# Density integrability

def admissible_theta_bound(gamma: float) -> float:
    return min(1.0, gamma / 3.0, 2.0 * gamma / 3.0 - 1.0)


def check_theta(theta: float, gamma: float) -> float:
    bound = admissible_theta_bound(gamma)
    if not 0.0 < theta < bound:
        raise InadmissibleExponentError(
            f"θ={theta} outside the admissible range 0 < θ < min{{1, γ/3, 2γ/3 − 1}} = {max(bound, 0.0):.6g} for γ={gamma}"
        )
    return theta


def default_theta(gamma: float) -> float:
    return min(0.1, 0.5 * admissible_theta_bound(gamma))


@dataclass(frozen=True)
class IntegrabilityEstimate:
    theta: float
    mean: float
    se: float
    values: np.ndarray


def integrability_value(rho_hist: np.ndarray, dt: float, params: SimParams, theta: float, domain: Domain) -> float:
    """int_0^T int (a rho^(gamma+theta) + delta rho^(beta+theta)) by the left rule on the step grid."""
    rho = rho_hist[:-1]
    integrand = params.a * rho ** (params.gamma + theta) + params.delta * rho ** (params.beta + theta)
    return float(dt * np.sum(integrand) * domain.cell_volume)


def pressure_integrability(
    trajectories: Sequence[Trajectory], params: SimParams, theta: float, domain: Domain
) -> IntegrabilityEstimate:
    check_theta(theta, params.gamma)
    values = np.array([integrability_value(t.rho, t.dt, params, theta, domain) for t in trajectories])
    if len(values) == 0:
        raise InsufficientPathsError("pressure integrability needs at least one path")
    se = float(np.std(values, ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
    return IntegrabilityEstimate(theta=theta, mean=float(np.mean(values)), se=se, values=values)


# Effective viscous flux

@dataclass(frozen=True)
class FluxField:
    values: np.ndarray


def effective_flux(state: State, params: SimParams, basis: Basis) -> FluxField:
    """F = a rho^gamma + delta rho^beta - (lambda + 2 mu) div u."""
    div_u = spectral_derivatives(state.u, basis).div
    values = params.pressure(state.rho.values) - (params.lam + 2.0 * params.mu) * div_u
    return FluxField(values=values)


# Test battery of space-time bumps: (centre as fraction of L, radius as fraction
# of min L, time centre as fraction of T, time radius as fraction of T).
BATTERY = (
    ((0.50, 0.50, 0.50), 0.30, 0.50, 0.45),
    ((0.30, 0.30, 0.50), 0.20, 0.40, 0.35),
    ((0.70, 0.30, 0.50), 0.20, 0.60, 0.35),
    ((0.30, 0.70, 0.50), 0.20, 0.50, 0.30),
    ((0.70, 0.70, 0.50), 0.20, 0.50, 0.40),
    ((0.50, 0.25, 0.30), 0.15, 0.30, 0.25),
    ((0.25, 0.50, 0.70), 0.15, 0.70, 0.25),
    ((0.60, 0.55, 0.40), 0.25, 0.55, 0.40),
)


def bump(s: np.ndarray) -> np.ndarray:
    """exp(1 - 1/(1 - s^2)) on |s| < 1, zero outside; peak value 1."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - s[inside] ** 2))
    return out


@dataclass(frozen=True)
class BumpFunction:
    space: np.ndarray
    t_center: float
    t_radius: float

    def time(self, t: np.ndarray) -> np.ndarray:
        return bump((np.asarray(t) - self.t_center) / self.t_radius)


def bump_battery(domain: Domain, T: float) -> List[BumpFunction]:
    mesh = domain.mesh()
    radius_scale = min(domain.lengths)
    battery = []
    for centre, radius, t_centre, t_radius in BATTERY:
        space = np.ones(domain.grid_shape)
        for a in range(domain.dim):
            space = space * bump((mesh[a] - centre[a] * domain.lengths[a]) / (radius * radius_scale))
        battery.append(BumpFunction(space=space, t_center=t_centre * T, t_radius=t_radius * T))
    return battery




def flux_pairing(
    traj: Trajectory, params: SimParams, basis: Basis, k: float, test_index: int = 0
) -> float:
    """int int psi(t) phi(x) F T_k(rho) over the path, with (psi, phi) from the test battery."""
    fn = bump_battery(basis.domain, traj.dt * traj.steps)[test_index]
    total = 0.0
    for i in range(traj.steps):
        weight = float(fn.time(traj.times[i]))
        if weight == 0.0:
            continue
        rho = traj.rho[i]
        div_u = spectral_derivatives(traj.u[i], basis).div
        F = params.pressure(rho) - (params.lam + 2.0 * params.mu) * div_u
        total += traj.dt * weight * float(np.sum(fn.space * F * T_k(rho, k)) * basis.weight)
    return total


def _check_schedule(values: Sequence[float], name: str, min_levels: int = 3) -> List[float]:
    values = list(values)
    if len(values) < min_levels:
        raise ScheduleError(f"{name} schedule needs at least {min_levels} levels, got {len(values)}")
    diffs = np.diff(values)
    if not (np.all(diffs > 0) or np.all(diffs < 0)):
        raise ScheduleError(f"{name} schedule must be strictly monotone: {values}")
    return values


@dataclass
class FluxStudy:
    parameter: str
    k: float
    frame: pd.DataFrame

    @property
    def passed(self) -> bool:
        inc = self.frame["increment"].to_numpy()[1:]
        return bool(np.all(np.diff(np.abs(inc)) < 0))


def flux_pairing_study(config, parameter: str, k: float = 2.0, paths: Optional[int] = None, levels=None) -> FluxStudy:
    """Pairing of the effective flux with T_k(rho) across a vanishing-parameter schedule (coupled seeds)."""
    if parameter not in ("eps", "delta"):
        raise ScheduleError(f"flux pairing study runs over 'eps' or 'delta', not {parameter!r}")
    schedule = levels if levels is not None else getattr(config, f"{parameter}_schedule")
    schedule = _check_schedule(schedule, parameter)
    paths = paths or min(config.ensemble_size, 8)
    rows = []
    previous = None
    for value in schedule:
        level = config.with_updates(params={parameter: value})
        basis, _ = setup(level)
        pairings = []
        for i in range(paths):
            traj = run_path(level, path_seed(level.master_seed, i))
            if traj.aborted:
                logger.warning("flux study: path %d aborted at %s=%g", i, parameter, value)
                continue
            pairings.append(flux_pairing(traj, level.params, basis, k))
        pairings = np.asarray(pairings)
        mean = float(np.mean(pairings)) if len(pairings) else math.nan
        se = float(np.std(pairings, ddof=1) / math.sqrt(len(pairings))) if len(pairings) > 1 else 0.0
        rows.append(
            {
                "parameter": parameter,
                "value": value,
                "paths": len(pairings),
                "pairing_mean": mean,
                "pairing_se": se,
                "increment": math.nan if previous is None else mean - previous,
            }
        )
        previous = mean
    return FluxStudy(parameter=parameter, k=k, frame=pd.DataFrame(rows))


# Renormalization families

def T(z: np.ndarray) -> np.ndarray:
    """Concave cut-off: z on [0, 1], 1 + (z-1) - (z-1)^2/4 on [1, 3], 2 beyond."""
    z = np.asarray(z, dtype=float)
    mid = 1.0 + (z - 1.0) - 0.25 * (z - 1.0) ** 2
    return np.where(z <= 1.0, z, np.where(z >= 3.0, 2.0, mid))


def T_prime(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return np.where(z <= 1.0, 1.0, np.where(z >= 3.0, 0.0, 1.0 - 0.5 * (z - 1.0)))


def T_k(z: np.ndarray, k: float) -> np.ndarray:
    return k * T(np.asarray(z, dtype=float) / k)


def T_k_prime(z: np.ndarray, k: float) -> np.ndarray:
    return T_prime(np.asarray(z, dtype=float) / k)


def _T_over_s2_integral(U: np.ndarray) -> np.ndarray:
    """int_1^U T(s)/s^2 ds for U >= 1."""
    U = np.asarray(U, dtype=float)
    V = np.minimum(U, 3.0)
    head = -(V - 1.0) / 4.0 + 1.5 * np.log(V) + (1.0 / V - 1.0) / 4.0
    tail = np.where(U > 3.0, 2.0 * (1.0 / 3.0 - 1.0 / np.maximum(U, 3.0)), 0.0)
    return head + tail


def L_k(z: np.ndarray, k: float) -> np.ndarray:
    """z log z below k, z log k + z int_k^z T_k(s)/s^2 ds above; b'(z) z - b(z) = T_k(z)."""
    z = np.asarray(z, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        low = np.where(z > 0, z * np.log(np.where(z > 0, z, 1.0)), 0.0)
    high = z * math.log(k) + z * _T_over_s2_integral(np.maximum(z / k, 1.0))
    return np.where(z < k, low, high)


def L_k_prime(z: np.ndarray, k: float) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        low = np.log(np.where(z > 0, z, np.nan)) + 1.0
        high = math.log(k) + _T_over_s2_integral(np.maximum(z / k, 1.0)) + T_k(z, k) / np.where(z > 0, z, 1.0)
    return np.where(z < k, low, high)


def beta_k(k: float) -> float:
    """Slope of L_k for z >= 3k, where L_k(z) = beta_k z - 2k."""
    return math.log(k) + float(_T_over_s2_integral(np.array(3.0))) + 2.0 / 3.0


@dataclass(frozen=True)
class Renormalizer:
    name: str
    b: Callable[[np.ndarray], np.ndarray]
    db: Callable[[np.ndarray], np.ndarray]


def identity_renormalizer() -> Renormalizer:
    return Renormalizer("identity", lambda z: np.asarray(z, dtype=float), lambda z: np.ones_like(z, dtype=float))


def cutoff_renormalizer(k: float) -> Renormalizer:
    return Renormalizer(f"T_k(k={k:g})", lambda z: T_k(z, k), lambda z: T_k_prime(z, k))


def log_renormalizer(k: float) -> Renormalizer:
    return Renormalizer(f"L_k(k={k:g})", lambda z: L_k(z, k), lambda z: L_k_prime(z, k))


def smooth_renormalizer(name: str, b: Callable, db: Callable) -> Renormalizer:
    return Renormalizer(name, b, db)


@dataclass(frozen=True)
class RenormResidual:
    name: str
    per_time: np.ndarray
    per_function: np.ndarray

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.per_function))) if len(self.per_function) else 0.0


def renorm_residual(
    traj: Trajectory,
    renormalizer: Renormalizer,
    params: SimParams,
    basis: Basis,
    battery: Optional[List[BumpFunction]] = None,
) -> RenormResidual:
    """Weak residual of the discrete renormalized continuity equation along a path.

    R = (b(rho') - b(rho))/dt + div_h(upwind b(rho) u) + (b'(rho) rho - b(rho)) div_h u
        - eps b'(rho') L_h rho'
    tested against the battery; stops at the stopping time.
    """
    if traj.rho.shape[0] != len(traj.times):
        raise ValueError("renormalized residual needs the density history")
    domain = basis.domain
    dt = traj.dt
    T_total = dt * traj.steps
    battery = battery if battery is not None else bump_battery(domain, T_total)
    steps = traj.steps if traj.stopped_at is None else min(traj.steps, int(round(traj.stopped_at / dt)))
    lap = neumann_laplacian(domain) if params.eps > 0 else None
    b, db = renormalizer.b, renormalizer.db
    w = domain.cell_volume

    per_time = np.zeros(steps)
    per_function = np.zeros(len(battery))
    for i in range(steps):
        rho, rho_new = traj.rho[i], traj.rho[i + 1]
        faces = face_velocities(traj.u[i], basis)
        b_rho = b(rho)
        R = (b(rho_new) - b_rho) / dt
        R = R + flux_divergence(upwind_fluxes(rho, faces, weight=b_rho), domain)
        R = R + (db(rho) * rho - b_rho) * discrete_divergence(faces, domain)
        if lap is not None:
            R = R - params.eps * db(rho_new) * (lap @ rho_new.ravel()).reshape(domain.grid_shape)
        t = traj.times[i]
        tested = np.array([float(fn.time(t)) * float(np.sum(fn.space * R) * w) for fn in battery])
        per_time[i] = np.max(np.abs(tested))
        per_function += dt * tested
    return RenormResidual(name=renormalizer.name, per_time=per_time, per_function=np.abs(per_function))


def oscillation_moment(
    rho_a: np.ndarray, rho_b: np.ndarray, k: float, gamma: float, domain: Domain, dt: float
) -> float:
    """int_0^T int |T_k(rho_a) - T_k(rho_b)|^(gamma + 1) over two density histories on one time grid."""
    steps = min(len(rho_a), len(rho_b)) - 1
    diff = np.abs(T_k(rho_a[:steps], k) - T_k(rho_b[:steps], k)) ** (gamma + 1.0)
    return float(dt * np.sum(diff) * domain.cell_volume)


def oscillation_sweep(
    rho_a: np.ndarray, rho_b: np.ndarray, ks: Sequence[float], gamma: float, domain: Domain, dt: float
) -> pd.DataFrame:
    moments = [oscillation_moment(rho_a, rho_b, k, gamma, domain, dt) for k in ks]
    grows = [False] + [b > a for a, b in zip(moments, moments[1:])]
    return pd.DataFrame({"k": list(ks), "moment": moments, "grows": grows})


# Magnetic divergence

def divB_norm(B: np.ndarray, basis: Basis) -> float:
    """L2 norm of the Galerkin projection of div B."""
    return float(np.linalg.norm(weak_divergence_matrix(basis) @ np.asarray(B, dtype=float)))


def solenoidal_project(B: np.ndarray, basis: Basis) -> np.ndarray:
    """Orthogonal projection onto the weakly divergence-free subspace of X_n."""
    return solenoidal_projector(basis) @ np.asarray(B, dtype=float)
