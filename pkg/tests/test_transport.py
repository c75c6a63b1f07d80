# tests/test_transport.py

import numpy as np
import pytest

from simulator.errors import CFLViolationError, NegativeDensityError, ShapeMismatchError
from simulator.transport import (
    admissible_dt,
    advance_density,
    density_bounds,
    density_field,
    discrete_divergence,
    divergence_sup_history,
    face_velocities,
    lipschitz_probe,
    neumann_laplacian,
    solve_S,
)


@pytest.fixture
def rho0(domain):
    x, y = domain.mesh()
    return density_field(1.0 + 0.3 * np.cos(x) * np.cos(y), domain)


def test_density_field_validation(domain):
    with pytest.raises(NegativeDensityError):
        density_field(-np.ones(domain.grid_shape), domain)
    with pytest.raises(ShapeMismatchError):
        density_field(np.ones((4, 4)), domain)


@pytest.mark.parametrize("eps", [0.0, 1e-3, 1e-1])
def test_mass_conserved(basis, rho0, rng, eps):
    u = 0.3 * rng.standard_normal(basis.coeff_len)
    rho = rho0
    for _ in range(20):
        rho = advance_density(rho, u, eps, 1e-3, basis)
    assert abs(rho.mass - rho0.mass) / rho0.mass <= 1e-12
    assert rho.min > 0


def test_constant_density_at_rest(basis, domain):
    rho = density_field(np.full(domain.grid_shape, 2.0), domain)
    out = advance_density(rho, np.zeros(basis.coeff_len), 1e-2, 1e-2, basis)
    assert np.allclose(out.values, 2.0, atol=1e-13)


def test_boundary_faces_carry_no_flux(basis, rng):
    faces = face_velocities(rng.standard_normal(basis.coeff_len), basis)
    assert np.all(faces[0][0] == 0) and np.all(faces[0][-1] == 0)
    assert np.all(faces[1][:, 0] == 0) and np.all(faces[1][:, -1] == 0)


def test_cfl_violation(basis, rho0, rng, domain):
    u = 100.0 * rng.standard_normal(basis.coeff_len)
    limit = admissible_dt(face_velocities(u, basis), domain)
    with pytest.raises(CFLViolationError) as info:
        advance_density(rho0, u, 0.0, 10 * limit, basis)
    assert info.value.admissible_dt == pytest.approx(limit)


def test_neumann_laplacian_kills_constants(domain):
    lap = neumann_laplacian(domain)
    assert np.allclose(lap @ np.ones(lap.shape[0]), 0.0, atol=1e-10)


def test_solve_s_shape_and_mass(basis, rho0, rng):
    u_traj = 0.2 * rng.standard_normal((5, basis.coeff_len))
    out = solve_S(u_traj, rho0, 1e-3, 1e-3, basis)
    assert out.shape == (6,) + basis.grid_shape
    masses = out.reshape(6, -1).sum(axis=1)
    assert np.allclose(masses, masses[0], rtol=1e-12)


def test_density_bounds_without_compression(rho0):
    lo, hi = density_bounds(rho0, np.zeros(10), 1e-3)
    assert lo == pytest.approx(rho0.min)
    assert hi == pytest.approx(rho0.max)


def test_density_bounds_widen_with_divergence(rho0):
    lo, hi = density_bounds(rho0, np.ones(10), 0.1)
    assert lo == pytest.approx(rho0.min * np.exp(-1.0))
    assert hi == pytest.approx(rho0.max * np.exp(1.0))


def test_discrete_divergence_of_zero(basis, domain):
    faces = face_velocities(np.zeros(basis.coeff_len), basis)
    assert np.all(discrete_divergence(faces, domain) == 0)


def test_lipschitz_ratio_bounds(basis, rho0, rng):
    u1 = 0.1 * rng.standard_normal((4, basis.coeff_len))
    u2 = u1 + 1e-3 * rng.standard_normal((4, basis.coeff_len))
    ratio = lipschitz_probe(u1, u2, rho0, 1e-3, 1e-3, basis, K=10.0)
    assert np.isfinite(ratio) and ratio >= 0
    assert lipschitz_probe(u1, u1, rho0, 1e-3, 1e-3, basis, K=10.0) == 0.0
    with pytest.raises(ValueError):
        lipschitz_probe(100 * u1, u2, rho0, 1e-3, 1e-3, basis, K=1e-3)


def test_cosine_mode_decays_like_the_heat_equation(basis, domain):
    x, _ = domain.mesh()
    eps, dt = 0.1, 1e-2
    rho = density_field(1.0 + 0.1 * np.cos(x), domain)
    out = advance_density(rho, np.zeros(basis.coeff_len), eps, dt, basis)
    amplitude = np.sum((out.values - 1.0) * np.cos(x)) / np.sum(0.1 * np.cos(x) ** 2)
    h = domain.spacing[0]
    discrete_eigval = 4.0 / h**2 * np.sin(h / 2) ** 2
    assert amplitude == pytest.approx(1.0 / (1.0 + eps * dt * discrete_eigval), rel=1e-12)
    assert amplitude == pytest.approx(np.exp(-eps * dt), abs=1e-5)
    assert out.mass == pytest.approx(rho.mass, rel=1e-12)


@pytest.mark.parametrize("eps", [0.0, 1e-2])
def test_simulated_minimum_respects_lower_bound(basis, rho0, rng, eps, domain):
    u = 0.3 * rng.standard_normal(basis.coeff_len)
    u_traj = np.tile(u, (20, 1))
    out = solve_S(u_traj, rho0, eps, 1e-3, basis)
    discrete = np.max(np.abs(discrete_divergence(face_velocities(u, basis), domain)))
    div_sup = np.maximum(divergence_sup_history(u_traj, basis), discrete)
    lower, upper = density_bounds(rho0, div_sup, 1e-3)
    assert out[-1].min() >= 0.95 * lower
    assert out[-1].max() <= upper / 0.95


def test_lipschitz_ratio_converges_as_perturbation_shrinks(basis, rho0, rng):
    u1 = 0.1 * rng.standard_normal((4, basis.coeff_len))
    v = rng.standard_normal((4, basis.coeff_len))
    ratios = [lipschitz_probe(u1, u1 + eta * v, rho0, 1e-3, 1e-3, basis, K=10.0) for eta in np.geomspace(1e-3, 1e-5, 10)]
    assert min(ratios) > 0
    assert max(ratios) / min(ratios) <= 1.5
