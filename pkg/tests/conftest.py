# tests/conftest.py - Shared small-problem fixtures

import math

import numpy as np
import pytest

from simulator.basis import Domain, build_basis
from simulator.config import build_config


@pytest.fixture
def domain():
    return Domain(dim=2, lengths=(math.pi, math.pi), grid_pts=(12, 12))


@pytest.fixture
def basis(domain):
    return build_basis(domain, 3)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))


@pytest.fixture
def small_config(tmp_path):
    """2-D, 12x12 grid, 3 modes per axis, 20 steps."""
    return build_config(
        {
            "domain": {"dim": 2, "grid_pts": (12, 12)},
            "params": {"K_modes": 4},
            "n_per_axis": 3,
            "dt": 1e-3,
            "T": 0.02,
            "ensemble_size": 4,
            "snapshot_every": 5,
            "output_dir": str(tmp_path / "out"),
            "workers": 1,
            "n_schedule": [2, 3, 4],
        }
    )


@pytest.fixture(autouse=True)
def no_ledger(monkeypatch):
    monkeypatch.setattr("simulator.db.DATABASE_URL", "")
