# tests/test_diagnostics.py

import math

import numpy as np
import pytest

from analysis.diagnostics import (
    BATTERY,
    MartingaleSample,
    T,
    T_k,
    L_k,
    L_k_prime,
    _check_schedule,
    admissible_theta_bound,
    beta_k,
    bogovskii_solve,
    bump,
    bump_battery,
    check_theta,
    cutoff_renormalizer,
    default_theta,
    divB_norm,
    effective_flux,
    energy_report,
    flux_pairing,
    grid_h1_norm,
    identity_renormalizer,
    integrability_value,
    log_renormalizer,
    martingale_qv_test,
    oscillation_moment,
    oscillation_sweep,
    pressure_integrability,
    renorm_residual,
    solenoidal_project,
    tol_energy,
    unit_direction,
    z_score,
)
from simulator.basis import Domain
from simulator.errors import (
    InadmissibleExponentError,
    InsufficientPathsError,
    NonZeroMeanError,
    ScheduleError,
)
from simulator.stepper import run_path, setup


@pytest.fixture
def deterministic(small_config):
    config = small_config.with_updates(noise_on=False, params={"eps": 0.0})
    basis, _ = setup(config)
    return config, basis, run_path(config, 0)


# Energy

def test_energy_report(small_config):
    basis, _ = setup(small_config)
    traj = run_path(small_config, 0)
    report = energy_report(traj, small_config.params, basis)
    assert report.residual.shape == (small_config.steps + 1,)
    assert report.residual[0] == pytest.approx(0.0, abs=1e-14)
    assert all(report.nondecreasing().values())
    assert report.sup_energy >= report.energy[0]
    frame = report.to_frame()
    assert list(frame.columns[:2]) == ["t", "energy"]
    assert abs(report.final_residual) <= tol_energy(small_config.dt, report.sup_energy, c_energy=100.0)


def test_energy_report_needs_density(small_config):
    basis, _ = setup(small_config)
    traj = run_path(small_config, 0, keep_density=False)
    with pytest.raises(ValueError):
        energy_report(traj, small_config.params, basis)


def test_tol_energy():
    assert tol_energy(1e-3, 2.0) == pytest.approx(10.0 * 1e-3 * 3.0)


# Martingale statistics

def test_z_score():
    assert z_score(np.zeros(10)) == 0.0
    assert z_score(np.ones(10)) == math.inf
    assert z_score(np.array([1.0, -1.0, 1.0, -1.0])) == 0.0


def test_unit_direction():
    assert np.array_equal(unit_direction(3, 1), [0.0, 1.0, 0.0])


def test_martingale_test_needs_paths():
    sample = MartingaleSample(np.zeros(2), np.zeros(2), np.eye(2), np.eye(2))
    with pytest.raises(InsufficientPathsError):
        martingale_qv_test([sample] * 10, 0)


def test_martingale_test_on_gaussian_samples(rng):
    qv = np.diag([0.5, 2.0])
    samples = [
        MartingaleSample(
            M1=np.sqrt(np.diag(qv)) * rng.standard_normal(2),
            M2=np.sqrt(np.diag(qv)) * rng.standard_normal(2),
            qv_f=qv,
            qv_g=qv,
        )
        for _ in range(400)
    ]
    for direction in (0, 1):
        result = martingale_qv_test(samples, direction)
        assert result.passed
        assert len(result.as_rows()) == 5
    biased = [MartingaleSample(s.M1 + 1.0, s.M2, s.qv_f, s.qv_g) for s in samples]
    assert not martingale_qv_test(biased, 0).passed


# Bogovskii

def _mean_zero_field(domain):
    x, y = domain.mesh()
    return np.cos(x) * np.cos(2 * y) + 0.5 * np.cos(3 * x)


def test_bogovskii_divergence(domain):
    f = _mean_zero_field(domain)
    result = bogovskii_solve(f, domain)
    assert result.v.shape == (2,) + domain.grid_shape
    assert [face.shape for face in result.faces] == [(13, 12), (12, 13)]
    assert result.residual <= 1e-6
    assert np.all(result.faces[0][[0, -1]] == 0) and np.all(result.faces[1][:, [0, -1]] == 0)


def test_bogovskii_trace_shrinks_under_refinement():
    traces = []
    for g in (12, 24):
        fine = Domain(dim=2, lengths=(math.pi, math.pi), grid_pts=(g, g))
        x, y = fine.mesh()
        result = bogovskii_solve(np.cos(x) * np.cos(y), fine)
        assert result.residual <= 1e-6
        traces.append(result.boundary_residual)
    assert traces[1] < 0.5 * traces[0]
    assert traces[1] < 0.1


def test_bogovskii_linear(domain):
    f = _mean_zero_field(domain)
    x, _ = domain.mesh()
    g = np.cos(2 * x)
    combined = bogovskii_solve(2.0 * f - g, domain).v
    expected = 2.0 * bogovskii_solve(f, domain).v - bogovskii_solve(g, domain).v
    assert np.allclose(combined, expected, atol=1e-10 * np.max(np.abs(expected)))


def test_bogovskii_edge_cases(domain):
    zero = bogovskii_solve(np.zeros(domain.grid_shape), domain)
    assert np.all(zero.v == 0)
    with pytest.raises(NonZeroMeanError):
        bogovskii_solve(np.ones(domain.grid_shape), domain)


def test_grid_h1_norm_of_constant(domain):
    v = np.ones((2,) + domain.grid_shape)
    assert grid_h1_norm(v, domain) == pytest.approx(math.sqrt(2 * math.pi**2))


# Integrability

def test_theta_range():
    assert admissible_theta_bound(5 / 3) == pytest.approx(min(1.0, 5 / 9, 10 / 9 - 1))
    assert 0 < default_theta(5 / 3) < admissible_theta_bound(5 / 3)
    with pytest.raises(InadmissibleExponentError):
        check_theta(0.5, 5 / 3)
    with pytest.raises(InadmissibleExponentError):
        check_theta(0.0, 5 / 3)


def test_pressure_integrability(deterministic):
    config, basis, traj = deterministic
    theta = default_theta(config.params.gamma)
    estimate = pressure_integrability([traj, traj], config.params, theta, basis.domain)
    assert estimate.mean == pytest.approx(integrability_value(traj.rho, traj.dt, config.params, theta, basis.domain))
    assert estimate.se == 0.0
    with pytest.raises(InsufficientPathsError):
        pressure_integrability([], config.params, theta, basis.domain)


# Effective flux and test battery

def test_bump():
    assert bump(np.array([0.0]))[0] == 1.0
    assert bump(np.array([1.0, -1.5]))[0] == 0.0
    assert np.all(bump(np.linspace(-0.99, 0.99, 11)) > 0)


def test_bump_battery(domain):
    battery = bump_battery(domain, 1.0)
    assert len(battery) == len(BATTERY) == 8
    for fn in battery:
        assert fn.space.shape == domain.grid_shape
        assert np.max(fn.space) <= 1.0
        assert fn.time(np.array([fn.t_center]))[0] == 1.0


def test_effective_flux_and_pairing(deterministic):
    config, basis, traj = deterministic
    flux = effective_flux(traj.final_state, config.params, basis)
    assert flux.values.shape == basis.grid_shape
    assert np.isfinite(flux_pairing(traj, config.params, basis, k=2.0))


def test_check_schedule():
    assert _check_schedule([3, 2, 1], "x") == [3, 2, 1]
    with pytest.raises(ScheduleError):
        _check_schedule([1, 2], "x")
    with pytest.raises(ScheduleError):
        _check_schedule([1, 3, 2], "x")


# Renormalization

def test_truncation_family():
    z = np.linspace(0, 10, 201)
    assert np.allclose(T(z)[z <= 1], z[z <= 1])
    assert np.allclose(T(z)[z >= 3], 2.0)
    assert np.all(np.diff(T(z)) >= -1e-15)
    assert np.allclose(T_k(z, 2.0), 2.0 * T(z / 2.0))


@pytest.mark.parametrize("k", [0.5, 1.0, 3.0])
def test_log_family(k):
    z = np.linspace(0.05, 10 * k, 400)
    # b'(z) z - b(z) = T_k(z)
    assert np.allclose(L_k_prime(z, k) * z - L_k(z, k), T_k(z, k), atol=1e-10)
    high = z[z >= 3 * k]
    assert np.allclose(L_k(high, k), beta_k(k) * high - 2 * k, atol=1e-10)
    # continuous at z = k
    assert L_k(np.array([k - 1e-9]), k)[0] == pytest.approx(L_k(np.array([k]), k)[0], abs=1e-7)


def test_renormalized_residual_vanishes_for_transport_invariant_b(deterministic):
    config, basis, traj = deterministic
    k = 2.0 * float(np.max(traj.rho))
    for renormalizer in (identity_renormalizer(), cutoff_renormalizer(k)):
        res = renorm_residual(traj, renormalizer, config.params, basis)
        assert res.max_abs <= 1e-8
        assert res.per_function.shape == (8,)


def test_renormalized_residual_for_log_family(deterministic):
    config, basis, traj = deterministic
    # every density value sits on the affine branch of L_k
    k = 0.25 * float(np.min(traj.rho))
    res = renorm_residual(traj, log_renormalizer(k), config.params, basis)
    assert res.max_abs <= 1e-8
    assert len(res.per_time) <= traj.steps
    curved = renorm_residual(traj, log_renormalizer(1.0), config.params, basis)
    assert np.isfinite(curved.max_abs)


def test_oscillation_moment(deterministic):
    config, basis, traj = deterministic
    assert oscillation_moment(traj.rho, traj.rho, 1.0, 5 / 3, basis.domain, traj.dt) == 0.0
    shifted = traj.rho * 1.1
    sweep = oscillation_sweep(traj.rho, shifted, [0.5, 1.0, 4.0], 5 / 3, basis.domain, traj.dt)
    assert list(sweep.columns) == ["k", "moment", "grows"]
    assert np.all(sweep["moment"] >= 0)


# Magnetic divergence

def test_divB_projection(basis, rng):
    B = rng.standard_normal(basis.coeff_len)
    assert divB_norm(B, basis) > 0
    assert divB_norm(solenoidal_project(B, basis), basis) < 1e-8


def test_projected_B_stays_solenoidal(small_config):
    config = small_config.with_updates(params={"project_B": True})
    basis, _ = setup(config)
    traj = run_path(config, 0)
    assert max(divB_norm(B, basis) for B in traj.B) < 1e-8
