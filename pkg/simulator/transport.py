# simulator/transport.py - Density solution operator S[u]
#
# Finite-volume scheme on the cell grid for
#     rho_t + div(rho u) = eps * Laplace(rho),   grad(rho).n = 0 on the boundary,
# with first-order upwind advection and backward-Euler diffusion.

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from simulator.basis import Basis, Domain, h1_norm, reconstruct, spectral_derivatives, split
from simulator.errors import CFLViolationError, NegativeDensityError, ShapeMismatchError

logger = logging.getLogger(__name__)

DEFAULT_CFL = 0.5


@dataclass(frozen=True)
class DensityField:
    values: np.ndarray
    cell_volume: float

    @property
    def mass(self) -> float:
        return float(np.sum(self.values) * self.cell_volume)

    @property
    def min(self) -> float:
        return float(np.min(self.values))

    @property
    def max(self) -> float:
        return float(np.max(self.values))


def density_field(values: np.ndarray, domain: Domain) -> DensityField:
    values = np.array(values, dtype=float)
    if values.shape != domain.grid_shape:
        raise ShapeMismatchError(f"density shape {values.shape} does not match grid {domain.grid_shape}")
    if np.any(values < 0):
        raise NegativeDensityError(f"density has negative entries (min {values.min():.3e})")
    return DensityField(values=values, cell_volume=domain.cell_volume)


def face_velocities(u: np.ndarray, basis: Basis) -> list:
    """Normal velocity u_a on the faces orthogonal to axis a; zero on boundary faces."""
    blocks = split(u, basis)
    return [basis.evaluate(blocks[a], faces_on=a) for a in range(basis.vector_dim)]


def admissible_dt(faces: Sequence[np.ndarray], domain: Domain, c_cfl: float = DEFAULT_CFL) -> float:
    rate = sum(float(np.max(np.abs(f))) / h for f, h in zip(faces, domain.spacing))
    return np.inf if rate == 0.0 else c_cfl / rate


def _slice(axis: int, ndim: int, s: slice) -> tuple:
    index = [slice(None)] * ndim
    index[axis] = s
    return tuple(index)


def upwind_fluxes(values: np.ndarray, faces: Sequence[np.ndarray], weight: Optional[np.ndarray] = None) -> list:
    """Upwind face fluxes of `weight` (default the density) carried by the face velocities."""
    carried = values if weight is None else weight
    ndim = values.ndim
    fluxes = []
    for a, vel in enumerate(faces):
        interior = vel[_slice(a, ndim, slice(1, -1))]
        left = carried[_slice(a, ndim, slice(None, -1))]
        right = carried[_slice(a, ndim, slice(1, None))]
        flux = np.zeros_like(vel)
        flux[_slice(a, ndim, slice(1, -1))] = np.where(interior > 0, interior * left, interior * right)
        fluxes.append(flux)
    return fluxes


def flux_divergence(fluxes: Sequence[np.ndarray], domain: Domain) -> np.ndarray:
    ndim = domain.dim
    out = np.zeros(domain.grid_shape)
    for a, flux in enumerate(fluxes):
        upper = flux[_slice(a, ndim, slice(1, None))]
        lower = flux[_slice(a, ndim, slice(None, -1))]
        out += (upper - lower) / domain.spacing[a]
    return out


def discrete_divergence(faces: Sequence[np.ndarray], domain: Domain) -> np.ndarray:
    """Cell divergence of the face velocities (the divergence the scheme sees)."""
    return flux_divergence(faces, domain)


def neumann_laplacian(domain: Domain) -> sparse.csc_matrix:
    ops = []
    for a, g in enumerate(domain.grid_pts):
        main = -2.0 * np.ones(g)
        main[0] = main[-1] = -1.0
        ops.append(sparse.diags([np.ones(g - 1), main, np.ones(g - 1)], [-1, 0, 1]) / domain.spacing[a] ** 2)
    lap = None
    for a, op in enumerate(ops):
        term = sparse.identity(1, format="csc")
        for b in range(domain.dim):
            term = sparse.kron(term, op if b == a else sparse.identity(domain.grid_pts[b]), format="csc")
        lap = term if lap is None else lap + term
    return lap.tocsc()


@lru_cache(maxsize=32)
def _diffusion_solver(domain: Domain, coefficient: float):
    lap = neumann_laplacian(domain)
    system = sparse.identity(lap.shape[0], format="csc") - coefficient * lap
    return splu(system.tocsc())


def implicit_diffusion(values: np.ndarray, coefficient: float, domain: Domain) -> np.ndarray:
    if coefficient == 0.0:
        return values
    solver = _diffusion_solver(domain, float(coefficient))
    return solver.solve(values.ravel()).reshape(domain.grid_shape)


def advance_density(
    rho: DensityField,
    u: np.ndarray,
    eps: float,
    dt: float,
    basis: Basis,
    c_cfl: float = DEFAULT_CFL,
) -> DensityField:
    """One conservative step of rho_t + div(rho u) = eps Laplace(rho)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if np.any(rho.values < 0):
        raise NegativeDensityError(f"density has negative entries (min {rho.min:.3e})")
    domain = basis.domain
    faces = face_velocities(u, basis)
    dt_max = admissible_dt(faces, domain, c_cfl)
    if dt > dt_max:
        raise CFLViolationError(dt, dt_max)
    values = rho.values - dt * flux_divergence(upwind_fluxes(rho.values, faces), domain)
    values = implicit_diffusion(values, eps * dt, domain)
    return DensityField(values=values, cell_volume=rho.cell_volume)


def solve_S(
    u_traj: np.ndarray,
    rho0: DensityField,
    eps: float,
    dt: float,
    basis: Basis,
    c_cfl: float = DEFAULT_CFL,
) -> np.ndarray:
    """Density trajectory (steps + 1, *grid) driven by velocity coefficients u_traj[step]."""
    u_traj = np.asarray(u_traj, dtype=float)
    out = np.empty((len(u_traj) + 1,) + basis.grid_shape)
    out[0] = rho0.values
    rho = rho0
    for step, u in enumerate(u_traj):
        rho = advance_density(rho, u, eps, dt, basis, c_cfl)
        out[step + 1] = rho.values
    return out


def divergence_sup_history(u_traj: np.ndarray, basis: Basis) -> np.ndarray:
    return np.array([np.max(np.abs(spectral_derivatives(u, basis).div)) for u in np.asarray(u_traj)])


def density_bounds(
    rho0: DensityField,
    div_sup: Sequence[float],
    dt: float,
    t: Optional[float] = None,
) -> Tuple[float, float]:
    """Two-sided bracket (min rho0) e^{-I(t)} <= rho(t) <= (max rho0) e^{I(t)}, I(t) = int ||div u||_inf."""
    div_sup = np.asarray(div_sup, dtype=float)
    steps = len(div_sup) if t is None else min(len(div_sup), int(round(t / dt)))
    integral = dt * float(np.sum(np.abs(div_sup[:steps])))
    return rho0.min * np.exp(-integral), rho0.max * np.exp(integral)


def density_h1_norm(values: np.ndarray, domain: Domain) -> float:
    grads = np.gradient(values, *domain.spacing) if domain.dim > 1 else [np.gradient(values, domain.spacing[0])]
    total = values**2 + sum(g**2 for g in grads)
    return float(np.sqrt(np.sum(total) * domain.cell_volume))


def lipschitz_probe(
    u1_traj: np.ndarray,
    u2_traj: np.ndarray,
    rho0: DensityField,
    eps: float,
    dt: float,
    basis: Basis,
    K: float,
) -> float:
    """sup_t ||S[u1] - S[u2]||_H1 / sup_t ||u1 - u2||_H1 for velocities in the class M_K."""
    u1_traj = np.asarray(u1_traj, dtype=float)
    u2_traj = np.asarray(u2_traj, dtype=float)
    for traj in (u1_traj, u2_traj):
        sup = float(np.max(np.abs(reconstruct(traj, basis))))
        if sup > K:
            raise ValueError(f"velocity sup-norm {sup:.3e} exceeds the class bound K={K}")
    den = max(h1_norm(a - b, basis) for a, b in zip(u1_traj, u2_traj))
    if den == 0.0:
        return 0.0
    s1 = solve_S(u1_traj, rho0, eps, dt, basis)
    s2 = solve_S(u2_traj, rho0, eps, dt, basis)
    num = max(density_h1_norm(a - b, basis.domain) for a, b in zip(s1, s2))
    return num / den
