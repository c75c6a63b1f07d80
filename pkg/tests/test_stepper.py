# tests/test_stepper.py

from dataclasses import replace

import numpy as np
import pytest

from simulator.errors import ShapeMismatchError
from simulator.galerkin import induction_rhs, mass_op, momentum_rhs, w1inf_norm
from simulator.noise import sample_brownian
from simulator.stepper import (
    em_step,
    fixed_point_substep,
    initial_fields,
    initial_state,
    regularize_initial_data,
    run_path,
    setup,
    update_stopping,
)


def test_initial_state(small_config):
    basis, _ = setup(small_config)
    state = initial_state(small_config, basis)
    assert state.t == 0.0
    assert state.u.shape == state.B.shape == (basis.coeff_len,)
    assert state.rho.min == pytest.approx(0.8, abs=0.05)
    assert not state.is_stopped
    assert state.stochastic_norm() == 0.0


def test_initial_fields_are_neumann_compatible(small_config):
    rho0, m0, B0 = initial_fields(small_config.domain, small_config.initial)
    assert rho0.shape == small_config.domain.grid_shape
    assert m0.shape == B0.shape == (2,) + rho0.shape
    assert np.mean(rho0) == pytest.approx(1.0, abs=1e-12)


def test_regularize_initial_data():
    rho0 = np.array([0.0, 1e-6, 1.0, 1e6])
    m0 = np.ones((1, 4))
    rho, m = regularize_initial_data(rho0, m0, 1e-3, 5.0)
    assert rho.min() == pytest.approx(1e-3)
    assert rho.max() == pytest.approx(1e-3 ** (-1 / 5))
    assert m[0, 0] == 0.0
    assert m[0, 2] == pytest.approx(1.0)
    assert m[0, 1] == pytest.approx(np.sqrt(1e-3 / 1e-6))


def test_run_path_shapes_and_mass(small_config):
    traj = run_path(small_config, 0)
    steps = small_config.steps
    assert not traj.aborted
    assert traj.steps == steps
    assert traj.rho.shape == (steps + 1, 12, 12)
    assert traj.dM1.shape == traj.dM2.shape == (steps, traj.u.shape[1])
    assert np.max(np.abs(traj.mass - traj.mass[0])) / traj.mass[0] <= 1e-12
    assert np.all(traj.rho > 0)
    assert traj.tau == pytest.approx(small_config.T)


def test_run_path_reproducible(small_config):
    a = run_path(small_config, 7)
    b = run_path(small_config, 7)
    c = run_path(small_config, 8)
    assert np.array_equal(a.u, b.u) and np.array_equal(a.rho, b.rho)
    assert not np.array_equal(a.u, c.u)


def test_run_path_uses_given_increments(small_config):
    w = sample_brownian(99, small_config.params.K_modes, small_config.T, small_config.dt)
    a = run_path(small_config, 0, brownian=w)
    b = run_path(small_config, 99)
    assert np.array_equal(a.B, b.B)
    with pytest.raises(ShapeMismatchError):
        run_path(small_config, 0, brownian=w.coarsen(2))


def test_noise_off_has_no_martingale(small_config):
    traj = run_path(small_config.with_updates(noise_on=False), 0)
    assert np.all(traj.dM1 == 0) and np.all(traj.dM2 == 0)
    assert np.all(traj.mart == 0)
    assert np.all(traj.dissipation >= 0)


def test_keep_density_false(small_config):
    traj = run_path(small_config, 0, keep_density=False)
    assert traj.rho.shape[0] == 0
    assert traj.mass.shape == (small_config.steps + 1,)


def test_stopped_path_is_frozen(small_config):
    config = small_config.with_updates(params={"N_stop": 0.0})
    traj = run_path(config, 0)
    assert traj.stopped_at == 0.0
    assert np.all(traj.u == traj.u[0])
    assert np.all(traj.B == traj.B[0])
    assert traj.times[-1] == pytest.approx(config.T)


def test_update_stopping(small_config):
    basis, _ = setup(small_config)
    state = initial_state(small_config, basis)
    assert update_stopping(state, 1e6).stopped is None
    stopped = update_stopping(state, state.l2_norm())
    assert stopped.stopped == 0.0
    assert update_stopping(stopped, 0.0) is stopped


def test_em_step(small_config):
    basis, noise = setup(small_config)
    state = initial_state(small_config, basis)
    dW = np.zeros((2, noise.K))
    new, record = em_step(state, small_config.params, basis, noise, dW, small_config.dt)
    assert new.t == pytest.approx(small_config.dt)
    assert np.all(record.dM1 == 0)
    assert record.ito_f == 0.0 and record.ito_g == 0.0
    assert record.ito_f_expected > 0
    assert new.rho.mass == pytest.approx(state.rho.mass, rel=1e-12)
    with pytest.raises(ShapeMismatchError):
        em_step(state, small_config.params, basis, noise, np.zeros((2, noise.K + 1)), small_config.dt)
    with pytest.raises(ValueError):
        em_step(update_stopping(state, 0.0), small_config.params, basis, noise, dW, small_config.dt)


def test_ito_terms_match_compensators_on_average(small_config):
    basis, noise = setup(small_config)
    state = initial_state(small_config, basis)
    w = sample_brownian(5, noise.K, 400 * small_config.dt, small_config.dt)
    realized, expected = [], []
    for i in range(400):
        _, record = em_step(state, small_config.params, basis, noise, w.step(i), small_config.dt)
        realized.append(record.ito_f + record.ito_g)
        expected.append(record.ito_f_expected + record.ito_g_expected)
    assert np.mean(realized) == pytest.approx(expected[0], rel=0.3)


def test_fixed_point_substep(small_config):
    basis, _ = setup(small_config)
    state = initial_state(small_config, basis)
    result = fixed_point_substep(state, small_config.params, basis, small_config.dt)
    assert result.iterations >= 1
    assert result.kappa < 1
    assert result.state.t == pytest.approx(small_config.dt)


def test_path_depends_only_on_past_increments(small_config):
    w = sample_brownian(3, small_config.params.K_modes, small_config.T, small_config.dt)
    other = sample_brownian(4, small_config.params.K_modes, small_config.T, small_config.dt)
    j = small_config.steps // 2
    a = run_path(small_config, 3, brownian=w)
    b = run_path(small_config, 3, brownian=w.splice(other, j))
    assert np.array_equal(a.u[: j + 1], b.u[: j + 1])
    assert np.array_equal(a.B[: j + 1], b.B[: j + 1])
    assert np.array_equal(a.rho[: j + 1], b.rho[: j + 1])
    assert not np.array_equal(a.u[-1], b.u[-1])


def test_cutoff_switch(small_config):
    basis, noise = setup(small_config)
    state = initial_state(small_config, basis)
    dW = np.zeros((2, noise.K))
    low = small_config.params.model_copy(update={"N_cutoff": 1e-3})
    _, record = em_step(state, low, basis, noise, dW, small_config.dt)
    assert 0.0 <= record.theta < 1.0
    off = low.model_copy(update={"use_cutoff": False})
    _, record = em_step(state, off, basis, noise, dW, small_config.dt)
    assert record.theta == 1.0


def test_frozen_density_step_is_the_momentum_update(small_config, rng):
    basis, noise = setup(small_config)
    params = small_config.params
    dt = small_config.dt
    state = initial_state(small_config, basis)
    dW = rng.standard_normal((2, noise.K)) * np.sqrt(dt)
    new, record = em_step(state, params, basis, noise, dW, dt, freeze_density=True)
    assert new.rho is state.rho
    rho = state.rho.values
    M = mass_op(rho, basis)
    expected_q = M.apply(state.u) + dt * record.theta * momentum_rhs(rho, state.u, state.B, params, basis) + record.dM1
    expected_B = state.B + dt * record.theta * induction_rhs(state.u, state.B, params, basis) + record.dM2
    assert np.allclose(M.apply(new.u), expected_q, rtol=1e-10, atol=1e-12)
    assert np.allclose(new.B, expected_B, rtol=1e-12, atol=1e-14)


def test_zero_cutoff_freezes_the_state(small_config, rng):
    basis, noise = setup(small_config)
    state = initial_state(small_config, basis)
    r = max(w1inf_norm(state.u, basis), w1inf_norm(state.B, basis))
    big = replace(state, u=state.u * 4.0 / r, B=state.B * 4.0 / r)
    params = small_config.params.model_copy(update={"N_cutoff": 1.0})
    dW = rng.standard_normal((2, noise.K)) * np.sqrt(small_config.dt)
    new, record = em_step(big, params, basis, noise, dW, small_config.dt, freeze_density=True)
    assert record.theta == 0.0
    assert np.all(record.dM1 == 0) and np.all(record.dM2 == 0)
    assert np.array_equal(new.B, big.B)
    assert np.allclose(new.u, big.u, rtol=1e-10, atol=1e-12)


def test_fixed_point_solves_the_implicit_step(small_config):
    basis, _ = setup(small_config)
    params = small_config.params
    dt = small_config.dt
    state = initial_state(small_config, basis)
    new = fixed_point_substep(state, params, basis, dt).state
    q = mass_op(state.rho.values, basis).apply(state.u)
    rho_new = new.rho.values
    u_implicit = mass_op(rho_new, basis).solve(q + dt * new.theta * momentum_rhs(rho_new, new.u, new.B, params, basis))
    B_implicit = state.B + dt * new.theta * induction_rhs(new.u, new.B, params, basis)
    scale = np.linalg.norm(np.concatenate([new.u, new.B]))
    assert np.linalg.norm(u_implicit - new.u) <= 1e-8 * scale
    assert np.linalg.norm(B_implicit - new.B) <= 1e-8 * scale


def test_contraction_factor_shrinks_with_dt(small_config):
    basis, _ = setup(small_config)
    state = initial_state(small_config, basis)
    coarse = fixed_point_substep(state, small_config.params, basis, 4e-3).kappa
    fine = fixed_point_substep(state, small_config.params, basis, 1e-3).kappa
    assert 0.0 < fine < 0.6 * coarse < 1.0
