# simulator/noise.py - Brownian paths and multiplicative noise families
#
# f_k(rho, m, x) = a1_k rho^((gamma+1)/2) shape_k(x) e_{dir(k)} + a2_k shape_k(x) m
# g_k(B, x)      = ag_k shape_k(x) B
# with a*_k = amplitude * k^(-decay), shapes normalized to grid sup-norm one.

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator
from scipy.special import zeta

from simulator.basis import Basis, Domain, project, sine_table
from simulator.errors import NegativeDensityError, ShapeMismatchError
from simulator.galerkin import MassOp

logger = logging.getLogger(__name__)


class NoiseSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    decay: float = 1.5
    f1_amplitude: float = 0.1
    f2_amplitude: float = 0.1
    g_amplitude: float = 0.1

    @field_validator("decay")
    @classmethod
    def check_decay(cls, v: float) -> float:
        if v <= 0.5:
            raise ValueError("noise decay exponent p must exceed 1/2 (summable Hilbert-Schmidt tail)")
        return v

    def scaled(self, factor: float) -> "NoiseSettings":
        return self.model_copy(
            update={
                "f1_amplitude": self.f1_amplitude * factor,
                "f2_amplitude": self.f2_amplitude * factor,
                "g_amplitude": self.g_amplitude * factor,
            }
        )


@dataclass(frozen=True, eq=False)
class BrownianPaths:
    """Increments of 2 x K independent Brownian motions, indexed [channel][mode][step]."""

    seed: int
    K: int
    dt: float
    increments: np.ndarray

    @property
    def steps(self) -> int:
        return self.increments.shape[2]

    @property
    def T(self) -> float:
        return self.steps * self.dt

    def step(self, index: int) -> np.ndarray:
        return self.increments[:, :, index]

    def coarsen(self, factor: int) -> "BrownianPaths":
        """Increments on the grid dt * factor: sums of consecutive fine increments."""
        if factor < 1 or self.steps % factor:
            raise ValueError(f"cannot coarsen {self.steps} steps by {factor}")
        coarse = self.increments.reshape(2, self.K, self.steps // factor, factor).sum(axis=3)
        return BrownianPaths(seed=self.seed, K=self.K, dt=self.dt * factor, increments=coarse)

    def splice(self, other: "BrownianPaths", from_step: int) -> "BrownianPaths":
        """Keep increments before `from_step`, take the tail from `other`."""
        merged = self.increments.copy()
        merged[:, :, from_step:] = other.increments[:, :, from_step:]
        return BrownianPaths(seed=self.seed, K=self.K, dt=self.dt, increments=merged)

    def reversed(self) -> "BrownianPaths":
        return BrownianPaths(seed=self.seed, K=self.K, dt=self.dt, increments=self.increments[:, :, ::-1].copy())

    def to_bytes(self) -> bytes:
        return np.ascontiguousarray(self.increments, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, seed: int, K: int, dt: float) -> "BrownianPaths":
        flat = np.frombuffer(data, dtype="<f8")
        return cls(seed=seed, K=K, dt=dt, increments=flat.reshape(2, K, -1).astype(float))


def path_seed(master_seed: int, path_index: int) -> int:
    return int(master_seed) ^ int(path_index)


def sample_brownian(seed: int, K: int, T: float, dt: float) -> BrownianPaths:
    if K < 1:
        raise ValueError("K must be at least 1")
    if dt <= 0 or T < dt:
        raise ValueError("need dt > 0 and T >= dt")
    steps = int(round(T / dt))
    rng = np.random.Generator(np.random.Philox(seed))
    increments = rng.standard_normal((2, K, steps)) * math.sqrt(dt)
    return BrownianPaths(seed=seed, K=K, dt=dt, increments=increments)


@dataclass(frozen=True, eq=False)
class NoiseModel:
    K: int
    gamma: float
    decay: float
    shapes: np.ndarray
    directions: np.ndarray
    a_f1: np.ndarray
    a_f2: np.ndarray
    a_g: np.ndarray
    settings: NoiseSettings = field(default_factory=NoiseSettings)

    @property
    def dim(self) -> int:
        return self.shapes.ndim - 1


def noise_shapes(domain: Domain, K: int) -> np.ndarray:
    """The K lowest Dirichlet modes of the box, each scaled to grid sup-norm one."""
    d = domain.dim
    ks = np.stack(np.meshgrid(*[np.arange(1, K + 1)] * d, indexing="ij"), -1).reshape(-1, d)
    lam = np.sum((ks * np.pi / np.asarray(domain.lengths)) ** 2, axis=1)
    chosen = sorted(range(len(ks)), key=lambda i: (lam[i], tuple(ks[i])))[:K]
    tables = [sine_table(K, domain.lengths[a], domain.centers(a)) for a in range(d)]
    shapes = []
    for i in chosen:
        shape = tables[0][ks[i, 0] - 1]
        for a in range(1, d):
            shape = np.multiply.outer(shape, tables[a][ks[i, a] - 1])
        shapes.append(shape / np.max(np.abs(shape)))
    return np.stack(shapes)


def build_noise_model(domain: Domain, K: int, gamma: float, settings: NoiseSettings = NoiseSettings()) -> NoiseModel:
    k = np.arange(1, K + 1, dtype=float)
    decay = k ** (-settings.decay)
    return NoiseModel(
        K=K,
        gamma=gamma,
        decay=settings.decay,
        shapes=noise_shapes(domain, K),
        directions=np.arange(K) % domain.dim,
        a_f1=settings.f1_amplitude * decay,
        a_f2=settings.f2_amplitude * decay,
        a_g=settings.g_amplitude * decay,
        settings=settings,
    )


def _expand(a: np.ndarray, ndim: int) -> np.ndarray:
    return a.reshape(a.shape + (1,) * ndim)


def eval_f(rho: np.ndarray, m: np.ndarray, model: NoiseModel) -> np.ndarray:
    """Momentum noise fields f_k, shape (K, d, *grid)."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise NegativeDensityError("noise coefficients need rho >= 0")
    if m.shape != (model.dim,) + rho.shape:
        raise ShapeMismatchError(f"momentum shape {m.shape} does not match density {rho.shape}")
    nd = rho.ndim
    shapes = model.shapes
    f = _expand(model.a_f2, nd)[:, None] * shapes[:, None] * m[None]
    power = rho ** ((model.gamma + 1.0) / 2.0)
    f[np.arange(model.K), model.directions] += _expand(model.a_f1, nd) * shapes * power
    return f


def eval_g(B: np.ndarray, model: NoiseModel) -> np.ndarray:
    """Magnetic noise fields g_k = ag_k shape_k B, shape (K, d, *grid)."""
    nd = B.ndim - 1
    return (_expand(model.a_g, nd) * model.shapes)[:, None] * B[None]


def velocity_projection(rho: np.ndarray, f_fields: np.ndarray, basis: Basis) -> np.ndarray:
    """P(f_k / sqrt(rho)), shape (K, n*d)."""
    if np.min(rho) <= 0:
        raise NegativeDensityError("projected noise needs inf rho > 0")
    return project(f_fields / np.sqrt(rho), basis)


def projected_noise(rho: np.ndarray, f_fields: np.ndarray, massop: MassOp, basis: Basis) -> np.ndarray:
    """Galerkin noise f_k^n = M^{1/2}[rho] P(f_k / sqrt(rho)), shape (K, n*d)."""
    return massop.apply_sqrt(velocity_projection(rho, f_fields, basis))


@dataclass(frozen=True)
class GrowthReport:
    empirical: Dict[str, float]
    analytic: Dict[str, float]
    tails: Dict[str, float]
    passed: bool

    def as_dict(self) -> dict:
        return {"empirical": self.empirical, "analytic": self.analytic, "tails": self.tails, "passed": self.passed}


def _max_ratio(num: np.ndarray, den: np.ndarray) -> float:
    mask = den > 0
    if not np.any(mask):
        return 0.0
    return float(np.max(num[mask] / den[mask]))


def validate_growth(
    model: NoiseModel,
    states: Iterable[Tuple[np.ndarray, np.ndarray, np.ndarray]],
    rel_step: float = 1e-6,
) -> GrowthReport:
    """Empirical constants of the growth assumptions over (rho, m, B) grid samples."""
    gamma = model.gamma
    c_f1 = c_f1_deriv = c_g = 0.0
    for rho, m, B in states:
        zero_m = np.zeros_like(m)
        f1 = eval_f(rho, zero_m, model)
        c_f1 = max(c_f1, _max_ratio(np.sum(f1**2, axis=(0, 1)), rho ** (gamma + 1)))
        hi = eval_f(rho * (1 + rel_step), zero_m, model)
        lo = eval_f(rho * (1 - rel_step), zero_m, model)
        with np.errstate(divide="ignore", invalid="ignore"):
            deriv = np.where(rho > 0, (hi - lo) / (2 * rel_step * rho), 0.0)
        c_f1_deriv = max(c_f1_deriv, _max_ratio(np.sum(deriv**2, axis=(0, 1)), rho ** (gamma - 1)))
        g = eval_g(B, model)
        c_g = max(c_g, _max_ratio(np.sum(g**2, axis=(0, 1)), np.sum(B**2, axis=0)))

    grid = model.shapes.shape[1:]
    unit = np.zeros((model.dim,) + grid)
    unit[0] = 1.0
    f2 = eval_f(np.zeros(grid), unit, model)
    c_f2 = float(np.max(np.sum(f2**2, axis=(0, 1))))
    c_g_deriv = float(np.max(np.sum(np.abs(eval_g(unit, model)[:, 0]), axis=0)))

    empirical = {
        "f1": c_f1,
        "f1_derivative": c_f1_deriv,
        "f2": c_f2,
        "g": c_g,
        "g_derivative": c_g_deriv,
    }
    analytic = {
        "f1": float(np.sum(model.a_f1**2)),
        "f1_derivative": float(((gamma + 1) / 2) ** 2 * np.sum(model.a_f1**2)),
        "f2": float(np.sum(model.a_f2**2)),
        "g": float(np.sum(model.a_g**2)),
        "g_derivative": float(np.sum(np.abs(model.a_g))),
    }
    s = model.settings
    hs_tail = float(zeta(2 * model.decay, model.K + 1))
    tails = {
        "f1": s.f1_amplitude**2 * hs_tail,
        "f2": s.f2_amplitude**2 * hs_tail,
        "g": s.g_amplitude**2 * hs_tail,
    }
    finite = all(np.isfinite(v) for v in list(empirical.values()) + list(tails.values()))
    # f1_derivative is a finite difference; allow its truncation error
    slack = {"f1_derivative": 1e-6}
    bounded = all(empirical[k] <= analytic[k] * (1 + slack.get(k, 1e-9)) + 1e-15 for k in empirical)
    return GrowthReport(empirical=empirical, analytic=analytic, tails=tails, passed=bool(finite and bounded))
