# analysis/selftest.py - Invariant battery behind the `selftest` command

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from analysis.diagnostics import (
    bogovskii_solve,
    cutoff_renormalizer,
    grid_h1_norm,
    identity_renormalizer,
    log_renormalizer,
    renorm_residual,
)
from analysis.montecarlo import (
    ENERGY_ORDER_MIN,
    STRONG_ORDER_RANGE,
    energy_order_study,
    mean_se,
    run_ensemble,
    stopping_saturation,
    strong_order_profile,
    strong_order_study,
)
from simulator.basis import Domain
from simulator.config import RunConfig
from simulator.errors import SimulationError
from simulator.galerkin import mass_lipschitz_check, mass_op
from simulator.noise import path_seed
from simulator.stepper import initial_fields, run_path, setup

logger = logging.getLogger(__name__)

BOGOVSKII_INPUTS = 20
BOGOVSKII_BAND = 2
BOGOVSKII_TRACE = 0.2
RENORM_TOLERANCE = 1e-8


@dataclass
class SelftestReport:
    checks: List[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks)

    def add(self, group: str, name: str, statistic: float, threshold: float, passed: bool) -> None:
        self.checks.append(
            {"group": group, "name": name, "statistic": float(statistic), "threshold": threshold, "passed": bool(passed)}
        )
        level = logging.INFO if passed else logging.WARNING
        logger.log(level, "[%s] %s: %.4g (threshold %g) %s", group, name, statistic, threshold, "ok" if passed else "FAILED")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.checks)


def quick_profile(config: RunConfig) -> RunConfig:
    """Short horizon and a small ensemble, doubled in `check_ensemble`."""
    return config.with_updates(T=0.1, ensemble_size=50, N_schedule=[1.0, 3.0, 10.0, 30.0])


def check_mass(config: RunConfig, report: SelftestReport) -> None:
    for eps in (0.0, 1e-3):
        for noise_on in (True, False):
            level = config.with_updates(params={"eps": eps}, noise_on=noise_on)
            traj = run_path(level, path_seed(level.master_seed, 0))
            drift = float(np.max(np.abs(traj.mass - traj.mass[0])) / traj.mass[0])
            report.add("mass", f"eps={eps:g} noise={'on' if noise_on else 'off'}", drift, 1e-12, drift <= 1e-12)


def check_ensemble(config: RunConfig, report: SelftestReport) -> None:
    size = config.ensemble_size
    result = run_ensemble(config, paths=2 * size, write=False)
    for check in result.report["checks"]:
        report.add("ensemble", check["name"], check["statistic"], check["threshold"], check["passed"])

    # mean sup energy + dissipation of the first half against the doubled ensemble
    first = mean_se([s.sup_energy + s.dissipation_T for s in result.summaries[:size] if not s.aborted])
    doubled = mean_se([s.sup_energy + s.dissipation_T for s in result.summaries if not s.aborted])
    gap = abs(doubled["mean"] - first["mean"])
    bound = 2.0 * max(first["se"], 1e-12)
    report.add("energy", "ensemble_doubling", gap, bound, gap <= bound)


def check_energy_order(config: RunConfig, report: SelftestReport) -> None:
    fit = energy_order_study(config)
    report.add("energy", "residual_order", fit.order, ENERGY_ORDER_MIN, fit.order >= ENERGY_ORDER_MIN)


def check_saturation(config: RunConfig, report: SelftestReport, paths: int = 20) -> None:
    study = stopping_saturation(config, paths=paths)
    report.add("stopping", "monotone_in_N", float(study.monotone), 1.0, study.monotone)
    report.add("stopping", "fraction_tau_T_at_max_N", study.final_fraction, 0.99, study.final_fraction > 0.99)


def _band_limited(domain: Domain, rng: np.random.Generator, band: int = BOGOVSKII_BAND) -> np.ndarray:
    """Gaussian coefficients on every cosine product with 0 <= k_a <= band, the constant mode left out."""
    mesh = domain.mesh()
    f = np.zeros(domain.grid_shape)
    for k in np.ndindex(*(band + 1,) * domain.dim):
        if not any(k):
            continue
        term = np.ones(domain.grid_shape)
        for a in range(domain.dim):
            term = term * np.cos(k[a] * np.pi * mesh[a] / domain.lengths[a])
        f += rng.standard_normal() * term
    return f - np.mean(f)


def check_bogovskii(config: RunConfig, report: SelftestReport) -> None:
    domain = config.domain
    rng = np.random.Generator(np.random.Philox(config.master_seed))
    inputs = [_band_limited(domain, rng) for _ in range(BOGOVSKII_INPUTS)]
    results = [bogovskii_solve(f, domain) for f in inputs]
    residual = max(r.residual for r in results)
    report.add("bogovskii", "divergence_residual", residual, 1e-6, residual <= 1e-6)
    trace = max(r.boundary_residual for r in results)
    report.add("bogovskii", "boundary_trace", trace, BOGOVSKII_TRACE, trace <= BOGOVSKII_TRACE)

    a, b = 0.7, -1.3
    combined = bogovskii_solve(a * inputs[0] + b * inputs[1], domain).v
    expected = a * results[0].v + b * results[1].v
    linearity = float(np.max(np.abs(combined - expected)) / max(np.max(np.abs(expected)), 1e-300))
    report.add("bogovskii", "linearity", linearity, 1e-10, linearity <= 1e-10)

    w = domain.cell_volume
    ratios = [grid_h1_norm(r.v, domain) / math.sqrt(np.sum(f**2) * w) for r, f in zip(results, inputs)]
    spread = max(ratios) / min(ratios)
    report.add("bogovskii", "h1_l2_ratio_spread", spread, 2.0, spread <= 2.0)


def check_mass_operator(config: RunConfig, report: SelftestReport) -> None:
    basis, _ = setup(config)
    c = 1.7
    block = mass_op(np.full(basis.grid_shape, c), basis).block
    identity_gap = float(np.max(np.abs(block - c * np.eye(basis.n))))
    report.add("mass_operator", "constant_density", identity_gap, 1e-12, identity_gap <= 1e-12)

    rho0, _, _ = initial_fields(config.domain, config.initial)
    op = mass_op(rho0, basis)
    bound = (1.0 + 1e-8) / float(np.min(rho0))
    report.add("mass_operator", "inverse_norm", op.inverse_norm, bound, op.inverse_norm <= bound)

    mesh = config.domain.mesh()
    bump = np.ones(basis.grid_shape)
    for a in range(config.domain.dim):
        bump = bump * np.sin(np.pi * mesh[a] / config.domain.lengths[a]) ** 2
    eta = 0.5 * float(np.min(rho0))
    ratios = []
    for h in (1e-1, 5e-2, 2.5e-2, 1.25e-2):
        lhs, rhs = mass_lipschitz_check(rho0, rho0 + h * bump, basis, eta)
        ratios.append(lhs / rhs)
    spread = max(ratios) / min(ratios)
    report.add("mass_operator", "lipschitz_ratio_spread", spread, 2.0, spread <= 2.0)


def check_strong_order(config: RunConfig, report: SelftestReport, paths: int = 16) -> None:
    fit = strong_order_study(strong_order_profile(config), paths=paths)
    lo, hi = STRONG_ORDER_RANGE
    report.add("strong_order", "fitted_exponent", fit.order, lo, lo <= fit.order <= hi)


def check_renormalization(config: RunConfig, report: SelftestReport) -> None:
    level = config.with_updates(noise_on=False, params={"eps": 0.0})
    basis, _ = setup(level)
    traj = run_path(level, path_seed(level.master_seed, 0))
    k = 2.0 * float(np.max(traj.rho))
    for renormalizer in (identity_renormalizer(), cutoff_renormalizer(k)):
        res = renorm_residual(traj, renormalizer, level.params, basis)
        report.add("renormalization", renormalizer.name, res.max_abs, RENORM_TOLERANCE, res.max_abs <= RENORM_TOLERANCE)
    # L_k is affine above 3k
    res = renorm_residual(traj, log_renormalizer(0.25 * float(np.min(traj.rho))), level.params, basis)
    report.add("renormalization", res.name, res.max_abs, RENORM_TOLERANCE, res.max_abs <= RENORM_TOLERANCE)


CHECKS: Dict[str, Callable[[RunConfig, SelftestReport], None]] = {
    "mass": check_mass,
    "ensemble": check_ensemble,
    "energy_order": check_energy_order,
    "saturation": check_saturation,
    "bogovskii": check_bogovskii,
    "mass_operator": check_mass_operator,
    "strong_order": check_strong_order,
    "renormalization": check_renormalization,
}


def run_selftest(config: RunConfig, quick: bool = True, only: Optional[List[str]] = None) -> SelftestReport:
    """Run the battery; a check that raises is recorded as failed instead of stopping the rest."""
    config = quick_profile(config) if quick else config
    report = SelftestReport()
    for name, check in CHECKS.items():
        if only and name not in only:
            continue
        logger.info("selftest: %s", name)
        try:
            check(config, report)
        except SimulationError as exc:
            logger.error("selftest %s raised: %s", name, exc.detail)
            report.add(name, "error", math.nan, 0.0, False)
    return report
