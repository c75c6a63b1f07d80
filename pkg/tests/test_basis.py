# tests/test_basis.py

import numpy as np
import pytest
from pydantic import ValidationError

from simulator.basis import (
    Domain,
    build_basis,
    gram_matrix,
    h1_norm,
    project,
    reconstruct,
    solenoidal_projector,
    spectral_derivatives,
    split,
    weak_divergence_matrix,
)
from simulator.errors import AliasingError, ShapeMismatchError


def test_domain_broadcasts_scalars():
    d = Domain(dim=3, lengths=2.0, grid_pts=8)
    assert d.lengths == (2.0, 2.0, 2.0)
    assert d.grid_shape == (8, 8, 8)


@pytest.mark.parametrize("kwargs", [{"dim": 4}, {"grid_pts": (9, 9)}, {"grid_pts": (6, 6)}, {"lengths": (1.0, -1.0)}])
def test_domain_rejects_bad_geometry(kwargs):
    with pytest.raises(ValidationError):
        Domain(**kwargs)


def test_modes_sorted_by_eigenvalue(basis):
    assert np.all(np.diff(basis.eigvals) >= 0)
    assert basis.mode_index((1, 1)) == 0
    assert basis.mode_index((9, 9)) is None
    assert basis.n == 9
    assert basis.coeff_len == 18


def test_gram_matrix_is_identity(basis):
    assert np.allclose(gram_matrix(basis), np.eye(basis.n), atol=1e-12)


def test_projection_inverts_reconstruction(basis, rng):
    c = rng.standard_normal(basis.coeff_len)
    assert np.allclose(project(reconstruct(c, basis), basis), c, atol=1e-12)
    s = rng.standard_normal(basis.n)
    assert np.allclose(project(reconstruct(s, basis), basis), s, atol=1e-12)


def test_project_rejects_wrong_grid(basis):
    with pytest.raises(ShapeMismatchError):
        project(np.zeros((5, 5)), basis)


def test_aliasing_guard(domain):
    with pytest.raises(AliasingError):
        build_basis(domain, 7)


def test_single_mode_derivatives(basis, domain):
    k = basis.mode_index((2, 1))
    c = np.zeros(basis.n)
    c[k] = 1.0
    x, y = domain.mesh()
    lap = spectral_derivatives(c, basis).laplacian
    assert np.allclose(lap, -basis.eigvals[k] * reconstruct(c, basis), atol=1e-12)
    # phi = (2/pi) sin(2x) sin(y) on [0, pi]^2
    grad = spectral_derivatives(c, basis).grad
    assert np.allclose(grad[0], (2 / np.pi) * 2 * np.cos(2 * x) * np.sin(y), atol=1e-12)


def test_vector_divergence_and_curl_of_gradient(basis, rng):
    c = rng.standard_normal(basis.coeff_len)
    derivs = spectral_derivatives(c, basis)
    blocks = split(c, basis)
    assert derivs.grad.shape == (2, 2) + basis.grid_shape
    assert np.allclose(derivs.div, derivs.grad[0, 0] + derivs.grad[1, 1])
    assert derivs.curl.shape == basis.grid_shape
    assert blocks.shape == (2, basis.n)


def test_h1_norm_weights_eigenvalues(basis):
    c = np.zeros(basis.n)
    c[0] = 2.0
    assert h1_norm(c, basis) == pytest.approx(2.0 * np.sqrt(1.0 + basis.eigvals[0]))


def test_solenoidal_projector(basis, rng):
    P = solenoidal_projector(basis)
    D = weak_divergence_matrix(basis)
    assert D.shape == (basis.n, basis.coeff_len)
    assert np.allclose(P @ P, P, atol=1e-10)
    assert np.allclose(P, P.T, atol=1e-12)
    B = rng.standard_normal(basis.coeff_len)
    assert np.linalg.norm(D @ (P @ B)) < 1e-10
    assert solenoidal_projector(basis) is P


def test_mode_tables_are_built_once(basis):
    assert basis.phi is basis.phi
    assert basis.dphi is basis.dphi
    assert basis.phi.shape == (basis.n, int(np.prod(basis.grid_shape)))
    assert basis.dphi.shape == (2, basis.n, int(np.prod(basis.grid_shape)))
