# simulator/basis.py - Galerkin space of Dirichlet-Laplacian eigenfunctions on a box

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from simulator.errors import AliasingError, ShapeMismatchError

AXES = "ijk"


class Domain(BaseModel):
    """Axis-aligned box [0, L_1] x ... x [0, L_d] with a tensor midpoint grid."""

    model_config = ConfigDict(frozen=True)

    dim: int = 2
    lengths: Tuple[float, ...] = (math.pi, math.pi)
    grid_pts: Tuple[int, ...] = (32, 32)

    @model_validator(mode="before")
    @classmethod
    def broadcast_scalars(cls, data):
        if isinstance(data, dict):
            dim = data.get("dim", 2)
            for key in ("lengths", "grid_pts"):
                value = data.get(key)
                if isinstance(value, (int, float)):
                    data = {**data, key: (value,) * dim}
                elif value is not None and len(value) == 1 and dim > 1:
                    data = {**data, key: tuple(value) * dim}
            if "lengths" not in data:
                data = {**data, "lengths": (math.pi,) * dim}
            if "grid_pts" not in data:
                data = {**data, "grid_pts": (32,) * dim}
        return data

    @field_validator("dim")
    @classmethod
    def check_dim(cls, v: int) -> int:
        if v not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        return v

    @field_validator("lengths")
    @classmethod
    def check_lengths(cls, v):
        if any(length <= 0 for length in v):
            raise ValueError("all domain lengths must be positive")
        return tuple(float(length) for length in v)

    @field_validator("grid_pts")
    @classmethod
    def check_grid(cls, v):
        if any(g < 8 or g % 2 for g in v):
            raise ValueError("grid_pts per axis must be even and at least 8")
        return tuple(int(g) for g in v)

    @model_validator(mode="after")
    def check_consistent(self):
        if len(self.lengths) != self.dim or len(self.grid_pts) != self.dim:
            raise ValueError("lengths and grid_pts must have one entry per dimension")
        return self

    @property
    def grid_shape(self) -> Tuple[int, ...]:
        return tuple(self.grid_pts)

    @property
    def spacing(self) -> Tuple[float, ...]:
        return tuple(L / g for L, g in zip(self.lengths, self.grid_pts))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    def centers(self, axis: int) -> np.ndarray:
        h = self.spacing[axis]
        return (np.arange(self.grid_pts[axis]) + 0.5) * h

    def faces(self, axis: int) -> np.ndarray:
        return np.arange(self.grid_pts[axis] + 1) * self.spacing[axis]

    def mesh(self) -> List[np.ndarray]:
        return np.meshgrid(*[self.centers(a) for a in range(self.dim)], indexing="ij")


def sine_table(k_max: int, length: float, x: np.ndarray, order: int = 0) -> np.ndarray:
    """Rows k = 1..k_max of d^order/dx^order sqrt(2/L) sin(k pi x / L)."""
    k = np.arange(1, k_max + 1)[:, None]
    w = k * np.pi / length
    s = math.sqrt(2.0 / length)
    if order == 0:
        return s * np.sin(w * x[None, :])
    if order == 1:
        return s * w * np.cos(w * x[None, :])
    if order == 2:
        return -s * w**2 * np.sin(w * x[None, :])
    raise ValueError("only derivative orders 0, 1, 2 are tabulated")


@dataclass(frozen=True, eq=False)
class Basis:
    """Normalized tensor sine modes phi_k, k_i >= 1, sorted by eigenvalue."""

    domain: Domain
    n_per_axis: int
    modes: np.ndarray
    eigvals: np.ndarray
    center_tables: Tuple[Tuple[np.ndarray, ...], ...]
    face_tables: Tuple[np.ndarray, ...]
    _index: Dict[Tuple[int, ...], int] = field(repr=False, default_factory=dict)

    @property
    def n(self) -> int:
        return self.modes.shape[0]

    @property
    def vector_dim(self) -> int:
        return self.domain.dim

    @property
    def coeff_len(self) -> int:
        return self.n * self.domain.dim

    @property
    def grid_shape(self) -> Tuple[int, ...]:
        return self.domain.grid_shape

    @property
    def weight(self) -> float:
        return self.domain.cell_volume

    def mode_index(self, k: Sequence[int]) -> Optional[int]:
        return self._index.get(tuple(int(v) for v in k))

    @cached_property
    def vector_eigvals(self) -> np.ndarray:
        return np.tile(self.eigvals, self.vector_dim)

    @cached_property
    def phi(self) -> np.ndarray:
        """(n, G) grid values of every mode."""
        return self.evaluate(np.eye(self.n)).reshape(self.n, -1)

    @cached_property
    def dphi(self) -> np.ndarray:
        """(d, n, G) grid values of the first derivatives of every mode."""
        d = self.domain.dim
        eye = np.eye(self.n)
        return np.stack(
            [self.evaluate(eye, tuple(int(a == b) for b in range(d))).reshape(self.n, -1) for a in range(d)]
        )

    @cached_property
    def div_matrix(self) -> np.ndarray:
        return divergence_matrix(self)

    @cached_property
    def solenoidal_projector(self) -> np.ndarray:
        Z = linalg.null_space(weak_divergence_matrix(self))
        return Z @ Z.T

    def evaluate(self, coeffs: np.ndarray, orders: Sequence[int] = (), faces_on: Optional[int] = None) -> np.ndarray:
        """Evaluate sum_k c_k d^orders phi_k on the grid (face grid along `faces_on`)."""
        d = self.domain.dim
        orders = tuple(orders) or (0,) * d
        tables = []
        for a in range(d):
            if faces_on == a:
                if orders[a] != 0:
                    raise ValueError("face tables carry values only")
                table = self.face_tables[a]
            else:
                table = self.center_tables[a][orders[a]]
            tables.append(table[self.modes[:, a] - 1])
        subs = "...m," + ",".join(f"m{AXES[a]}" for a in range(d)) + "->..." + AXES[:d]
        return np.einsum(subs, coeffs, *tables)


def build_basis(domain: Domain, n_per_axis: int, oversampling: int = 2) -> Basis:
    """Build X_n for `domain` with n_per_axis modes per axis (n = n_per_axis**dim)."""
    if n_per_axis < 1:
        raise ValueError("n_per_axis must be at least 1")
    if any(n_per_axis * oversampling > g for g in domain.grid_pts):
        raise AliasingError(
            f"grid {domain.grid_pts} too coarse for {n_per_axis} modes per axis "
            f"with oversampling {oversampling}"
        )
    d = domain.dim
    ks = np.stack(np.meshgrid(*[np.arange(1, n_per_axis + 1)] * d, indexing="ij"), -1).reshape(-1, d)
    lam = np.sum((ks * np.pi / np.asarray(domain.lengths)) ** 2, axis=1)
    order = sorted(range(len(ks)), key=lambda i: (lam[i], tuple(ks[i])))
    modes = ks[order]
    eigvals = lam[order]

    center_tables = tuple(
        tuple(sine_table(n_per_axis, domain.lengths[a], domain.centers(a), r) for r in range(3))
        for a in range(d)
    )
    face_tables = []
    for a in range(d):
        table = sine_table(n_per_axis, domain.lengths[a], domain.faces(a))
        table[:, 0] = 0.0
        table[:, -1] = 0.0
        face_tables.append(table)

    return Basis(
        domain=domain,
        n_per_axis=n_per_axis,
        modes=modes,
        eigvals=eigvals,
        center_tables=center_tables,
        face_tables=tuple(face_tables),
        _index={tuple(int(v) for v in k): i for i, k in enumerate(modes)},
    )


def gram_matrix(basis: Basis) -> np.ndarray:
    return basis.phi @ basis.phi.T * basis.weight


def project(field: np.ndarray, basis: Basis) -> np.ndarray:
    """L2 projection onto X_n: scalar fields give n coefficients, vector fields n*d.

    Vector coefficients are stored component-major: [u_1 modes..., u_2 modes..., ...].
    Leading batch axes in front of the component axis are kept.
    """
    field = np.asarray(field, dtype=float)
    grid = basis.grid_shape
    nd = len(grid)
    if field.shape[-nd:] != grid:
        raise ShapeMismatchError(f"field shape {field.shape} does not end with grid {grid}")
    lead = field.shape[:-nd]
    flat = field.reshape(lead + (-1,))
    coeffs = flat @ basis.phi.T * basis.weight
    if not lead:
        return coeffs
    if lead[-1] != basis.vector_dim:
        raise ShapeMismatchError(f"vector field must have {basis.vector_dim} components, got {lead[-1]}")
    return coeffs.reshape(lead[:-1] + (basis.coeff_len,))


def reconstruct(coeffs: np.ndarray, basis: Basis) -> np.ndarray:
    """Sum c_k phi_k on the grid; vector coefficient blocks give (d, *grid) fields."""
    coeffs = np.asarray(coeffs, dtype=float)
    size = coeffs.shape[-1]
    lead = coeffs.shape[:-1]
    if size == basis.n:
        values = coeffs @ basis.phi
        return values.reshape(lead + basis.grid_shape)
    if size == basis.coeff_len:
        blocks = coeffs.reshape(lead + (basis.vector_dim, basis.n))
        return (blocks @ basis.phi).reshape(lead + (basis.vector_dim,) + basis.grid_shape)
    raise ShapeMismatchError(f"coefficient length {size} matches neither {basis.n} nor {basis.coeff_len}")


def split(coeffs: np.ndarray, basis: Basis) -> np.ndarray:
    """View a vector coefficient array as (d, n) component blocks."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape[-1] != basis.coeff_len:
        raise ShapeMismatchError(f"expected {basis.coeff_len} coefficients, got {coeffs.shape[-1]}")
    return coeffs.reshape(coeffs.shape[:-1] + (basis.vector_dim, basis.n))


@dataclass(frozen=True)
class Derivatives:
    """Grid derivative fields. For vectors grad[i, a] = d_a u_i."""

    grad: np.ndarray
    div: Optional[np.ndarray]
    curl: Optional[np.ndarray]
    laplacian: np.ndarray


def curl_from_grad(grad: np.ndarray) -> np.ndarray:
    d = grad.shape[0]
    if d == 2:
        return grad[1, 0] - grad[0, 1]
    return np.stack(
        [
            grad[2, 1] - grad[1, 2],
            grad[0, 2] - grad[2, 0],
            grad[1, 0] - grad[0, 1],
        ]
    )


def spectral_derivatives(x: np.ndarray, basis: Basis) -> Derivatives:
    """Analytic derivatives of the sine expansion of `x` (coefficients or a grid field)."""
    x = np.asarray(x, dtype=float)
    coeffs = x if x.shape in ((basis.n,), (basis.coeff_len,)) else project(x, basis)
    grid = basis.grid_shape
    d = basis.vector_dim
    if coeffs.shape == (basis.n,):
        grad = (coeffs @ basis.dphi).reshape((d,) + grid)
        lap = reconstruct(-basis.eigvals * coeffs, basis)
        return Derivatives(grad=grad, div=None, curl=None, laplacian=lap)
    blocks = split(coeffs, basis)
    # grad[i, a] = sum_k C[i, k] dphi[a, k, :]
    grad = np.einsum("ik,akx->iax", blocks, basis.dphi).reshape((d, d) + grid)
    div = sum(grad[i, i] for i in range(d))
    lap = reconstruct(-basis.vector_eigvals * coeffs, basis)
    return Derivatives(grad=grad, div=div, curl=curl_from_grad(grad), laplacian=lap)


def divergence_matrix(basis: Basis) -> np.ndarray:
    """(G, n*d) matrix taking vector coefficients to grid values of div u."""
    return np.concatenate([basis.dphi[a].T for a in range(basis.vector_dim)], axis=1)


def weak_divergence_matrix(basis: Basis) -> np.ndarray:
    """(n, n*d) matrix of <div v, phi_j> for v in X_n: divergence tested on the scalar space."""
    return basis.phi @ basis.div_matrix * basis.weight


def solenoidal_projector(basis: Basis) -> np.ndarray:
    """Orthogonal projector (in coefficient space) onto {v in X_n : <div v, phi_j> = 0 for all j}."""
    return basis.solenoidal_projector


def h1_norm(coeffs: np.ndarray, basis: Basis) -> float:
    coeffs = np.asarray(coeffs, dtype=float)
    lam = basis.eigvals if coeffs.shape[-1] == basis.n else basis.vector_eigvals
    return float(np.sqrt(np.sum((1.0 + lam) * coeffs**2)))


def gradient_norm_sq(coeffs: np.ndarray, basis: Basis) -> float:
    """||grad v||^2, exact on X_n."""
    coeffs = np.asarray(coeffs, dtype=float)
    lam = basis.eigvals if coeffs.shape[-1] == basis.n else basis.vector_eigvals
    return float(np.sum(lam * coeffs**2))


def integrate(field: np.ndarray, basis_or_domain: Union[Basis, Domain]) -> float:
    domain = basis_or_domain.domain if isinstance(basis_or_domain, Basis) else basis_or_domain
    return float(np.sum(field) * domain.cell_volume)
