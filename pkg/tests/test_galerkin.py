# tests/test_galerkin.py

import numpy as np
import pytest
from pydantic import ValidationError

from simulator.basis import gradient_norm_sq, project, reconstruct, spectral_derivatives
from simulator.errors import NegativeDensityError
from simulator.galerkin import (
    SimParams,
    cutoff_theta,
    induction_convective_part,
    induction_rhs,
    lorentz_force,
    lorentz_part,
    mass_lipschitz_check,
    mass_op,
    momentum_rhs,
    pressure_part,
    theta_profile,
    viscous_part,
)


@pytest.fixture
def rho(domain):
    x, y = domain.mesh()
    return 1.0 + 0.4 * np.cos(x) * np.cos(y)


def test_default_params_valid():
    p = SimParams()
    assert p.gamma == pytest.approx(5 / 3)
    assert SimParams(**{"lambda": 0.5}).lam == 0.5


@pytest.mark.parametrize(
    "kwargs, message",
    [
        ({"gamma": 1.2}, "3/2"),
        ({"gamma": 2.0, "beta": 3.0}, "β must exceed max"),
        ({"mu": 0.0}, "μ must be positive"),
        ({"mu": 1.0, "lam": -1.0}, "2μ \\+ 3λ"),
        ({"nu": -1.0}, "ν must be positive"),
        ({"delta": -1.0}, "δ must be nonnegative"),
    ],
)
def test_invalid_params(kwargs, message):
    with pytest.raises(ValidationError, match=message):
        SimParams(**kwargs)


def test_subcritical_gamma_override():
    assert SimParams(gamma=1.2, allow_subcritical_gamma=True).gamma == 1.2


def test_mass_operator_constant_density(basis):
    M = mass_op(np.full(basis.grid_shape, 3.0), basis)
    assert np.allclose(M.block, 3.0 * np.eye(basis.n), atol=1e-12)
    assert M.matrix.shape == (basis.coeff_len, basis.coeff_len)


def test_mass_operator_inverse(basis, rho, rng):
    M = mass_op(rho, basis)
    v = rng.standard_normal(basis.coeff_len)
    assert np.allclose(M.apply(M.solve(v)), v, atol=1e-10)
    assert np.allclose(M.apply_sqrt(M.apply_sqrt(v)), M.apply(v), atol=1e-10)
    assert M.inverse_norm <= (1 + 1e-8) / rho.min()


def test_mass_operator_needs_positive_density(basis):
    rho = np.ones(basis.grid_shape)
    rho[0, 0] = 0.0
    with pytest.raises(NegativeDensityError):
        mass_op(rho, basis)


def test_mass_lipschitz(basis, rho):
    lhs, rhs = mass_lipschitz_check(rho, rho * 1.01, basis, eta=0.5)
    assert lhs > 0 and rhs > 0
    lhs2, rhs2 = mass_lipschitz_check(rho, rho * 1.005, basis, eta=0.5)
    assert lhs2 / rhs2 == pytest.approx(lhs / rhs, rel=0.1)
    with pytest.raises(ValueError):
        mass_lipschitz_check(rho, rho, basis, eta=10.0)


def test_viscous_part_dissipates(basis, rng):
    u = rng.standard_normal(basis.coeff_len)
    assert -u @ viscous_part(u, SimParams(), basis) > 0


def test_lorentz_and_induction_cancel(basis, rng):
    u = rng.standard_normal(basis.coeff_len)
    B = rng.standard_normal(basis.coeff_len)
    total = u @ lorentz_part(B, basis) + B @ induction_convective_part(u, B, basis)
    scale = np.linalg.norm(u) * np.linalg.norm(B) ** 2
    assert abs(total) <= 1e-10 * scale


def test_momentum_rhs_at_rest_is_pressure_only(basis, rho):
    zero = np.zeros(basis.coeff_len)
    params = SimParams()
    rhs = momentum_rhs(rho, zero, zero, params, basis)
    assert rhs.shape == (basis.coeff_len,)
    assert np.linalg.norm(momentum_rhs(np.ones(basis.grid_shape), zero, zero, params, basis)) < 1e-10


def test_theta_profile():
    assert theta_profile(0.0, 2.0) == 1.0
    assert theta_profile(2.0, 2.0) == 1.0
    assert theta_profile(3.0, 2.0) == 0.0
    values = [theta_profile(r, 2.0) for r in np.linspace(1.5, 3.5, 101)]
    assert all(b <= a for a, b in zip(values, values[1:]))
    assert theta_profile(2.5, 2.0) == pytest.approx(0.5)


def test_cutoff_theta(basis, rng):
    u = rng.standard_normal(basis.coeff_len)
    assert cutoff_theta(u, u, 1e6, basis) == 1.0
    assert cutoff_theta(u, u, 1e-6, basis) == 0.0
    with pytest.raises(ValueError):
        cutoff_theta(u, u, 0.0, basis)


def test_mass_operator_is_monotone_in_density(basis, rho, domain):
    x, y = domain.mesh()
    heavier = rho + 0.3 * np.sin(x) ** 2 * np.sin(y) ** 2
    gap = mass_op(heavier, basis).block - mass_op(rho, basis).block
    assert np.min(np.linalg.eigvalsh(gap)) >= -1e-12


def test_viscous_pairing_matches_quadrature(basis, rng):
    params = SimParams(mu=1.3, **{"lambda": 0.5})
    u = rng.standard_normal(basis.coeff_len)
    derivs = spectral_derivatives(u, basis)
    w = basis.weight
    expected = params.mu * np.sum(derivs.grad**2) * w + (params.lam + params.mu) * np.sum(derivs.div**2) * w
    assert -u @ viscous_part(u, params, basis) == pytest.approx(expected, rel=1e-10)
    assert params.mu * gradient_norm_sq(u, basis) == pytest.approx(params.mu * np.sum(derivs.grad**2) * w, rel=1e-10)


def test_induction_at_rest_is_pure_diffusion(basis, rng):
    params = SimParams(nu=0.7)
    B = rng.standard_normal(basis.coeff_len)
    rhs = induction_rhs(np.zeros(basis.coeff_len), B, params, basis)
    assert np.allclose(rhs, -0.7 * basis.vector_eigvals * B, atol=1e-12)
    assert np.all(induction_rhs(rng.standard_normal(basis.coeff_len), np.zeros(basis.coeff_len), params, basis) == 0)
    grad = spectral_derivatives(B, basis).grad
    assert -B @ rhs == pytest.approx(0.7 * np.sum(grad**2) * basis.weight, rel=1e-10)


def test_lorentz_force_is_advection_minus_magnetic_pressure(basis, rng):
    B = rng.standard_normal(basis.coeff_len)
    derivs = spectral_derivatives(B, basis)
    B_grid = reconstruct(B, basis)
    advection = np.einsum("b...,ab...->a...", B_grid, derivs.grad)
    magnetic_pressure = np.einsum("i...,ia...->a...", B_grid, derivs.grad)
    assert np.allclose(lorentz_force(B_grid, derivs.curl), advection - magnetic_pressure, atol=1e-12)


def test_lorentz_part_of_single_mode(basis, domain):
    B = np.zeros(basis.coeff_len)
    B[basis.mode_index((1, 1))] = 1.0
    x, y = domain.mesh()
    s = 2.0 / np.pi
    force = np.stack([np.zeros_like(x), -(s**2) * np.sin(x) ** 2 * np.sin(y) * np.cos(y)])
    assert np.allclose(lorentz_part(B, basis), project(force, basis), atol=1e-12)


def test_pressure_gradient_linearization(basis, domain):
    params = SimParams()
    x, y = domain.mesh()
    bump = np.sin(x) * np.sin(y)
    c, h = 1.5, 1e-6
    assert np.allclose(pressure_part(np.full(domain.grid_shape, c), params, basis), 0.0, atol=1e-12)
    slope = params.a * params.gamma * c ** (params.gamma - 1) + params.delta * params.beta * c ** (params.beta - 1)
    linear = slope * basis.div_matrix.T @ bump.ravel() * basis.weight
    difference = (pressure_part(c + h * bump, params, basis) - pressure_part(c - h * bump, params, basis)) / (2 * h)
    assert np.allclose(difference, linear, rtol=1e-6, atol=1e-8)


def test_theta_profile_slope_is_bounded():
    r = np.linspace(1.9, 3.1, 12001)
    values = np.array([theta_profile(v, 2.0) for v in r])
    slope = np.abs(np.diff(values)) / np.diff(r)
    assert np.max(slope) <= 15.0 / 8.0 + 1e-6
