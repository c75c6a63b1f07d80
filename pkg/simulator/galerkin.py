# simulator/galerkin.py - Finite-dimensional operators of the Galerkin scheme

import logging
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import linalg

from simulator.basis import Basis, reconstruct, spectral_derivatives, split
from simulator.errors import NegativeDensityError
from simulator.transport import DensityField

logger = logging.getLogger(__name__)


class SimParams(BaseModel):
    """Physical and regularization constants of the approximate system."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    mu: float = 1.0
    lam: float = Field(0.0, alias="lambda")
    nu: float = 1.0
    a: float = 1.0
    gamma: float = 5.0 / 3.0
    beta: float = 5.0
    delta: float = 1e-3
    eps: float = 1e-3
    N_cutoff: float = 10.0
    N_stop: float = 10.0
    K_modes: int = 8
    use_cutoff: bool = True
    project_B: bool = False
    c_cfl: float = 0.5
    allow_subcritical_gamma: bool = False

    @model_validator(mode="after")
    def check_regime(self):
        if self.mu <= 0:
            raise ValueError("μ must be positive")
        if 2 * self.mu + 3 * self.lam < 0:
            raise ValueError("2μ + 3λ must be nonnegative")
        if self.nu <= 0:
            raise ValueError("ν must be positive")
        if self.a <= 0:
            raise ValueError("a must be positive")
        if self.gamma <= 1:
            raise ValueError("γ must exceed 1")
        if self.gamma <= 1.5 and not self.allow_subcritical_gamma:
            raise ValueError("γ must exceed 3/2 (existence regime γ > 3/2)")
        if self.beta <= max(4.0, self.gamma):
            raise ValueError("β must exceed max{4, γ}")
        if self.delta < 0:
            raise ValueError("δ must be nonnegative")
        if self.eps < 0:
            raise ValueError("ε must be nonnegative")
        if self.N_cutoff <= 0:
            raise ValueError("cut-off level N must be positive")
        if self.N_stop < 0:
            raise ValueError("stopping level N must be nonnegative")
        if self.K_modes < 1:
            raise ValueError("K_modes must be at least 1")
        if not 0 < self.c_cfl <= 1:
            raise ValueError("c_cfl must lie in (0, 1]")
        return self

    def pressure(self, rho: np.ndarray) -> np.ndarray:
        return self.a * rho**self.gamma + self.delta * rho**self.beta

    def pressure_potential(self, rho: np.ndarray) -> np.ndarray:
        return self.a / (self.gamma - 1) * rho**self.gamma + self.delta / (self.beta - 1) * rho**self.beta


@dataclass(frozen=True, eq=False)
class MassOp:
    """M[rho] with <M v, w> = int rho v.w; the scalar block acts on every component."""

    block: np.ndarray
    chol: Tuple[np.ndarray, bool]
    sqrt_block: np.ndarray
    block_eigvals: np.ndarray
    dim: int

    @property
    def matrix(self) -> np.ndarray:
        return linalg.block_diag(*([self.block] * self.dim))

    @property
    def sqrt(self) -> np.ndarray:
        return linalg.block_diag(*([self.sqrt_block] * self.dim))

    def _blocks(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return v.reshape(v.shape[:-1] + (self.dim, -1))

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return (self._blocks(v) @ self.block).reshape(v.shape)

    def apply_sqrt(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return (self._blocks(v) @ self.sqrt_block).reshape(v.shape)

    def solve(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        n = self.block.shape[0]
        rhs = v.reshape(-1, n).T
        return linalg.cho_solve(self.chol, rhs).T.reshape(v.shape)

    @property
    def inverse_norm(self) -> float:
        return float(1.0 / self.block_eigvals[0])

    def inverse_block(self) -> np.ndarray:
        return linalg.cho_solve(self.chol, np.eye(self.block.shape[0]))


def _values(rho: Union[DensityField, np.ndarray]) -> np.ndarray:
    return rho.values if isinstance(rho, DensityField) else np.asarray(rho, dtype=float)


def mass_op(rho: Union[DensityField, np.ndarray], basis: Basis) -> MassOp:
    values = _values(rho)
    if np.min(values) <= 0:
        raise NegativeDensityError(
            f"mass operator needs inf rho > 0 (min rho = {np.min(values):.3e})"
        )
    block = (basis.phi * (values.ravel() * basis.weight)) @ basis.phi.T
    block = 0.5 * (block + block.T)
    eigvals, eigvecs = linalg.eigh(block)
    sqrt_block = (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T
    return MassOp(
        block=block,
        chol=linalg.cho_factor(block, lower=True),
        sqrt_block=sqrt_block,
        block_eigvals=eigvals,
        dim=basis.vector_dim,
    )


def mass_lipschitz_check(
    rho1: Union[DensityField, np.ndarray],
    rho2: Union[DensityField, np.ndarray],
    basis: Basis,
    eta: float,
) -> Tuple[float, float]:
    """(||M^-1[rho1] - M^-1[rho2]||_2, ||rho1 - rho2||_L1) for densities bounded below by eta."""
    v1, v2 = _values(rho1), _values(rho2)
    if min(np.min(v1), np.min(v2)) < eta:
        raise ValueError(f"densities must stay above eta={eta}")
    inv1 = mass_op(v1, basis).inverse_block()
    inv2 = mass_op(v2, basis).inverse_block()
    lhs = float(np.linalg.norm(inv1 - inv2, 2))
    rhs = float(np.sum(np.abs(v1 - v2)) * basis.weight)
    return lhs, rhs


# Momentum drift N1, split by term so that energy pairings can be checked one at a time.

def viscous_part(u: np.ndarray, params: SimParams, basis: Basis) -> np.ndarray:
    """mu Laplace(u) + (lambda + mu) grad div u, in weak form."""
    D = basis.div_matrix
    grad_div = D.T @ (D @ u) * basis.weight
    return -params.mu * basis.vector_eigvals * u - (params.lam + params.mu) * grad_div


def pressure_part(rho: np.ndarray, params: SimParams, basis: Basis) -> np.ndarray:
    """-grad(a rho^gamma + delta rho^beta), tested as int p div(phi)."""
    return basis.div_matrix.T @ params.pressure(rho).ravel() * basis.weight


def convective_part(rho: np.ndarray, u_grid: np.ndarray, basis: Basis) -> np.ndarray:
    """-div(rho u (x) u), tested as int rho u_i u_a d_a phi."""
    d = basis.vector_dim
    flux = (rho * u_grid[:, None] * u_grid[None, :]).reshape(d, d, -1)
    return (np.einsum("iax,ajx->ij", flux, basis.dphi) * basis.weight).ravel()


def density_gradient(rho: np.ndarray, basis: Basis) -> np.ndarray:
    return np.stack(np.gradient(rho, *basis.domain.spacing))


def artificial_part(rho: np.ndarray, grad_u: np.ndarray, params: SimParams, basis: Basis) -> np.ndarray:
    """-eps grad(u) grad(rho)."""
    if params.eps == 0.0:
        return np.zeros(basis.coeff_len)
    grad_rho = density_gradient(rho, basis)
    field = -params.eps * np.einsum("ia...,a...->i...", grad_u, grad_rho)
    return _project_vector(field, basis)


def lorentz_force(B_grid: np.ndarray, curl_B: np.ndarray) -> np.ndarray:
    """(curl B) x B on the grid; in 2-D curl B is the scalar omega and the force is omega (-B_y, B_x)."""
    if B_grid.shape[0] == 2:
        return np.stack([-curl_B * B_grid[1], curl_B * B_grid[0]])
    return np.cross(curl_B, B_grid, axis=0)


def lorentz_part(B: np.ndarray, basis: Basis) -> np.ndarray:
    derivs = spectral_derivatives(B, basis)
    return _project_vector(lorentz_force(reconstruct(B, basis), derivs.curl), basis)


def _project_vector(field: np.ndarray, basis: Basis) -> np.ndarray:
    flat = field.reshape(basis.vector_dim, -1)
    return (flat @ basis.phi.T * basis.weight).ravel()


def momentum_rhs(
    rho: Union[DensityField, np.ndarray],
    u: np.ndarray,
    B: np.ndarray,
    params: SimParams,
    basis: Basis,
) -> np.ndarray:
    """Coefficients <N1[rho, u, B], phi_j> of the deterministic momentum drift."""
    values = _values(rho)
    u_grid = reconstruct(u, basis)
    grad_u = spectral_derivatives(u, basis).grad
    return (
        viscous_part(u, params, basis)
        + pressure_part(values, params, basis)
        + convective_part(values, u_grid, basis)
        + artificial_part(values, grad_u, params, basis)
        + lorentz_part(B, basis)
    )


_LEVI_CIVITA = np.zeros((3, 3, 3))
for (_i, _j, _k), _sign in {(0, 1, 2): 1, (1, 2, 0): 1, (2, 0, 1): 1, (0, 2, 1): -1, (2, 1, 0): -1, (1, 0, 2): -1}.items():
    _LEVI_CIVITA[_i, _j, _k] = _sign


def electric_field(u_grid: np.ndarray, B_grid: np.ndarray) -> np.ndarray:
    """u x B; a scalar (out-of-plane) field in 2-D."""
    if u_grid.shape[0] == 2:
        return u_grid[0] * B_grid[1] - u_grid[1] * B_grid[0]
    return np.cross(u_grid, B_grid, axis=0)


def induction_convective_part(u: np.ndarray, B: np.ndarray, basis: Basis) -> np.ndarray:
    """curl(u x B), tested as int (u x B).curl(phi)."""
    E = electric_field(reconstruct(u, basis), reconstruct(B, basis))
    w = basis.weight
    if basis.vector_dim == 2:
        flat = E.ravel()
        return np.concatenate([-(basis.dphi[1] @ flat), basis.dphi[0] @ flat]) * w
    flat = E.reshape(3, -1)
    # curl(phi e_i)_c = eps_{c a i} d_a phi
    pairing = np.einsum("cx,ajx->caj", flat, basis.dphi)
    return (np.einsum("cai,caj->ij", _LEVI_CIVITA, pairing) * w).ravel()


def induction_rhs(u: np.ndarray, B: np.ndarray, params: SimParams, basis: Basis) -> np.ndarray:
    """Coefficients <N2[u, B], phi_j> = <curl(u x B) + nu Laplace(B), phi_j>."""
    return induction_convective_part(u, B, basis) - params.nu * basis.vector_eigvals * B


def w1inf_norm(coeffs: np.ndarray, basis: Basis) -> float:
    """sup|v| + sup|grad v| on the grid."""
    grid = reconstruct(coeffs, basis)
    grad = spectral_derivatives(coeffs, basis).grad
    sup_v = float(np.max(np.sqrt(np.sum(grid**2, axis=0))))
    sup_grad = float(np.max(np.sqrt(np.sum(grad**2, axis=(0, 1)))))
    return sup_v + sup_grad


def theta_profile(r: float, N: float) -> float:
    """Quintic smoothstep cut-off: 1 on [0, N], 0 on [N+1, inf), nonincreasing, |theta'| <= 15/8."""
    if r <= N:
        return 1.0
    if r >= N + 1:
        return 0.0
    t = r - N
    return 1.0 - t**3 * (10.0 - 15.0 * t + 6.0 * t**2)


def cutoff_theta(u: np.ndarray, B: np.ndarray, N: float, basis: Basis) -> float:
    if N <= 0:
        raise ValueError("cut-off level N must be positive")
    return theta_profile(max(w1inf_norm(u, basis), w1inf_norm(B, basis)), N)
