# analysis/montecarlo.py - Ensembles, streaming statistics and limit studies

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from analysis.diagnostics import (
    MartingaleSample,
    _check_schedule,
    default_theta,
    divB_norm,
    energy_report,
    integrability_value,
    martingale_qv_test,
    martingale_sample,
    oscillation_moment,
    tol_energy,
)
from simulator.basis import Basis, build_basis, h1_norm, project, reconstruct
from simulator.config import RunConfig
from simulator.errors import EnsembleFailure, ScheduleError
from simulator.export import export_csv, export_json, output_paths, write_state
from simulator.noise import GrowthReport, path_seed, sample_brownian, validate_growth
from simulator.stepper import State, Trajectory, run_path, setup
from simulator.transport import discrete_divergence, divergence_sup_history, face_velocities

logger = logging.getLogger(__name__)

ABORT_BUDGET = 0.10
MASS_TOLERANCE = 1e-12
LOWER_BOUND_FACTOR = 0.95
PROJECTED_DIVB = 1e-8
INTEGRABILITY_SPREAD = 2.0
MARTINGALE_DIRECTIONS = (0, 1, 2)
STRONG_ORDER_RANGE = (0.4, 0.6)
STRONG_ORDER_NOISE = 40.0
STRONG_ORDER_REFINEMENT = 16
ENERGY_ORDER_MIN = 0.9
AGGREGATE_METRICS = (
    "sup_energy",
    "final_energy",
    "dissipation_T",
    "artificial_T",
    "ito_T",
    "ito_expected_T",
    "ito_bound_T",
    "residual_T",
    "integrability",
    "mass_drift",
    "min_rho",
    "divB_max",
    "divB_drift_C",
)


class RunningStats:
    """Welford mean/variance, mergeable across workers."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def push(self, x: float) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    def extend(self, values) -> "RunningStats":
        for x in values:
            self.push(float(x))
        return self

    def merge(self, other: "RunningStats") -> "RunningStats":
        out = RunningStats()
        out.count = self.count + other.count
        if out.count == 0:
            return out
        delta = other.mean - self.mean
        out.mean = self.mean + delta * other.count / out.count
        out.m2 = self.m2 + other.m2 + delta**2 * self.count * other.count / out.count
        return out

    @property
    def variance(self) -> float:
        return self.m2 / (self.count - 1) if self.count > 1 else 0.0

    @property
    def se(self) -> float:
        return math.sqrt(self.variance / self.count) if self.count > 1 else 0.0


def mean_se(values: Sequence[float]) -> Dict[str, float]:
    values = np.asarray(values, dtype=float)
    if len(values) == 0:
        return {"mean": math.nan, "se": math.nan}
    se = float(np.std(values, ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
    return {"mean": float(np.mean(values)), "se": se}


@dataclass
class PathSummary:
    index: int
    seed: int
    aborted: bool
    abort_reason: Optional[str]
    abort_step: Optional[int]
    stopped_at: Optional[float]
    tau_is_T: bool
    energy0: float
    sup_energy: float
    final_energy: float
    dissipation_T: float
    artificial_T: float
    ito_T: float
    ito_expected_T: float
    ito_bound_T: float
    residual_T: float
    max_abs_residual: float
    energy_tol: float
    mass_drift: float
    min_rho: float
    lower_bound_ratio: float
    integrability: float
    delta_rho_beta: float
    divB_max: float
    divB_drift_C: float
    martingale: MartingaleSample
    final_state: State = field(repr=False)
    timeseries: pd.DataFrame = field(repr=False)


def density_lower_bounds(traj: Trajectory, basis: Basis) -> np.ndarray:
    """min rho0 * exp(-int_0^t |div u|_inf) per grid time, with the larger of the spectral and face divergences."""
    if traj.steps == 0:
        return np.array([float(np.min(traj.rho[0]))])
    spectral = divergence_sup_history(traj.u[:-1], basis)
    discrete = np.array(
        [np.max(np.abs(discrete_divergence(face_velocities(u, basis), basis.domain))) for u in traj.u[:-1]]
    )
    div_sup = np.maximum(spectral, discrete)
    integral = np.concatenate([[0.0], np.cumsum(div_sup) * traj.dt])
    return float(np.min(traj.rho[0])) * np.exp(-integral)


def divB_drift_constant(divB: np.ndarray, times: np.ndarray, dt: float) -> float:
    """Smallest C >= 0 with |div B(t)| <= |div B(0)| + C dt t on the grid times."""
    if len(divB) < 2:
        return 0.0
    return float(max(0.0, np.max((divB[1:] - divB[0]) / (dt * times[1:len(divB)]))))


def timeseries_frame(traj: Trajectory, energy: np.ndarray, basis: Basis, every: int, index: int) -> pd.DataFrame:
    rows = sorted(set(range(0, traj.steps + 1, every)) | {traj.steps})
    theta = traj.theta if traj.steps else np.array([1.0])
    records = []
    for i in rows:
        t = float(traj.times[i])
        records.append(
            {
                "path": index,
                "step": i,
                "t": t,
                "mass": float(traj.mass[i]),
                "energy": float(energy[i]),
                "u_H1": h1_norm(traj.u[i], basis),
                "B_H1": h1_norm(traj.B[i], basis),
                "divB": divB_norm(traj.B[i], basis),
                "theta": float(theta[min(i, len(theta) - 1)]),
                "stopped": traj.stopped_at is not None and t >= traj.stopped_at,
            }
        )
    return pd.DataFrame(records)


def summarize_path(traj: Trajectory, config: RunConfig, index: int) -> PathSummary:
    basis, _ = setup(config)
    params = config.params
    report = energy_report(traj, params, basis)
    energy = report.energy
    rho = traj.rho
    mass0 = traj.mass[0]
    lower = density_lower_bounds(traj, basis)
    min_rho_t = rho.reshape(len(rho), -1).min(axis=1)
    beta_norms = np.sum(rho**params.beta, axis=tuple(range(1, rho.ndim))) * basis.weight
    divB = np.array([divB_norm(B, basis) for B in traj.B])
    return PathSummary(
        index=index,
        seed=traj.seed,
        aborted=traj.aborted,
        abort_reason=traj.abort_reason,
        abort_step=traj.steps if traj.aborted else None,
        stopped_at=traj.stopped_at,
        tau_is_T=traj.stopped_at is None or math.isclose(traj.stopped_at, config.T),
        energy0=float(energy[0]),
        sup_energy=report.sup_energy,
        final_energy=float(energy[-1]),
        dissipation_T=float(report.dissipation[-1]),
        artificial_T=float(report.artificial[-1]),
        ito_T=float(report.ito[-1]),
        ito_expected_T=float(report.ito_expected[-1]),
        ito_bound_T=float(report.ito_bound[-1]),
        residual_T=report.final_residual,
        max_abs_residual=report.max_abs_residual,
        energy_tol=tol_energy(config.dt, report.sup_energy),
        mass_drift=float(np.max(np.abs(traj.mass - mass0)) / mass0),
        min_rho=float(np.min(min_rho_t)),
        lower_bound_ratio=float(np.min(min_rho_t / lower)),
        integrability=integrability_value(rho, traj.dt, params, default_theta(params.gamma), basis.domain)
        if traj.steps
        else 0.0,
        delta_rho_beta=float(params.delta * np.max(beta_norms)),
        divB_max=float(np.max(divB)),
        divB_drift_C=divB_drift_constant(divB, traj.times, traj.dt),
        martingale=martingale_sample(traj),
        final_state=traj.final_state,
        timeseries=timeseries_frame(traj, energy, basis, config.snapshot_every, index),
    )


def simulate_path(config: RunConfig, index: int) -> PathSummary:
    """Run and reduce one path; module-level so worker processes can pickle it."""
    traj = run_path(config, path_seed(config.master_seed, index))
    return summarize_path(traj, config, index)


def map_paths(config: RunConfig, count: int, worker: Callable = simulate_path) -> List[PathSummary]:
    """Run `count` paths, in a process pool when config.workers > 1; results ordered by path index."""
    indices = list(range(count))
    if config.workers > 1 and count > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            return list(pool.map(worker, [config] * count, indices))
    return [worker(config, i) for i in indices]


@dataclass
class EnsembleResult:
    report: dict
    timeseries: pd.DataFrame
    summaries: List[PathSummary]

    @property
    def passed(self) -> bool:
        return bool(self.report["passed"])


def _check(name: str, statistic: float, threshold: float, passed: bool) -> dict:
    return {"name": name, "statistic": statistic, "threshold": threshold, "passed": bool(passed)}


def config_record(config: RunConfig) -> dict:
    """Config fields that determine results (worker count and output location excluded)."""
    return config.model_dump(mode="json", by_alias=True, exclude={"workers", "output_dir"})


def aggregate(summaries: Sequence[PathSummary]) -> Dict[str, Dict[str, float]]:
    out = {}
    for metric in AGGREGATE_METRICS:
        values = [getattr(s, metric) for s in summaries]
        two_pass = mean_se(values)
        running = RunningStats().extend(values)
        out[metric] = {
            **two_pass,
            "running_mean": running.mean if running.count else math.nan,
            "running_se": running.se if running.count else math.nan,
        }
    return out


def _aggregation_gap(aggregates: Dict[str, Dict[str, float]]) -> float:
    gap = 0.0
    for values in aggregates.values():
        for a, b in (("mean", "running_mean"), ("se", "running_se")):
            x, y = values[a], values[b]
            if math.isnan(x) and math.isnan(y):
                continue
            gap = max(gap, abs(x - y) / max(1.0, abs(x)))
    return gap


def ensemble_checks(
    summaries: Sequence[PathSummary], aggregates: dict, total: int, project_B: bool = False
) -> List[dict]:
    good = [s for s in summaries if not s.aborted]
    aborted = total - len(good)
    checks = [_check("abort_budget", aborted / total, ABORT_BUDGET, aborted / total <= ABORT_BUDGET)]
    if good:
        mass = max(s.mass_drift for s in good)
        checks.append(_check("mass_conservation", mass, MASS_TOLERANCE, mass <= MASS_TOLERANCE))
        min_rho = min(s.min_rho for s in good)
        checks.append(_check("positivity", min_rho, 0.0, min_rho > 0.0))
        ratio = min(s.lower_bound_ratio for s in good)
        checks.append(_check("density_lower_bound", ratio, LOWER_BOUND_FACTOR, ratio >= LOWER_BOUND_FACTOR))
        energy = max(abs(s.residual_T) / s.energy_tol for s in good)
        checks.append(_check("energy_residual", energy, 1.0, energy <= 1.0))
        if project_B:
            div_b = max(s.divB_max for s in good)
            checks.append(_check("divB_projected", div_b, PROJECTED_DIVB, div_b <= PROJECTED_DIVB))
    gap = _aggregation_gap(aggregates)
    checks.append(_check("aggregation_agreement", gap, 1e-12, gap <= 1e-12))
    nd = good[0].martingale.M1.shape[0] if good else 0
    if len(good) >= 50:
        for direction in MARTINGALE_DIRECTIONS:
            if direction < nd:
                test = martingale_qv_test([s.martingale for s in good], direction)
                checks.extend(test.as_rows())
    else:
        logger.info("martingale tests skipped: %d completed paths (< 50)", len(good))
    return checks


def run_ensemble(config: RunConfig, paths: Optional[int] = None, write: bool = True) -> EnsembleResult:
    """Run the ensemble, aggregate, write report.json / timeseries.csv; fails if > 10% of paths abort."""
    total = paths or config.ensemble_size
    logger.info("running %d paths (dim=%d, n=%d, dt=%g, T=%g)", total, config.domain.dim, config.n_per_axis, config.dt, config.T)
    summaries = map_paths(config, total)
    good = [s for s in summaries if not s.aborted]
    aggregates = aggregate(good)
    checks = ensemble_checks(summaries, aggregates, total, project_B=config.params.project_B)
    aborts = [
        {"path": s.index, "seed": s.seed, "step": s.abort_step, "cause": s.abort_reason}
        for s in summaries
        if s.aborted
    ]
    report = {
        "config": config_record(config),
        "paths": total,
        "aborted": len(aborts),
        "abort_fraction": len(aborts) / total,
        "aborts": aborts,
        "stopping": {
            "N_stop": config.params.N_stop,
            "fraction_tau_T": float(np.mean([s.tau_is_T for s in good])) if good else math.nan,
        },
        "aggregates": aggregates,
        "checks": checks,
        "passed": all(c["passed"] for c in checks),
    }
    timeseries = pd.concat([s.timeseries for s in summaries], ignore_index=True)
    if write:
        out = output_paths(config.output_dir)
        export_json(report, out["report"])
        export_csv(timeseries, out["timeseries"])
        if good:
            write_state(good[0].final_state, config.domain, out["state"])
    if len(aborts) / total > ABORT_BUDGET:
        raise EnsembleFailure(f"{len(aborts)} of {total} paths aborted (budget {ABORT_BUDGET:.0%})")
    logger.info("ensemble done: %d aborted, passed=%s", len(aborts), report["passed"])
    return EnsembleResult(report=report, timeseries=timeseries, summaries=summaries)


# Limit studies

@dataclass
class StudyTable:
    parameter: str
    frame: pd.DataFrame
    criteria: Dict[str, bool]

    @property
    def passed(self) -> bool:
        return all(self.criteria.values())


def _strictly_decreasing(values: Sequence[float]) -> bool:
    values = [v for v in values if not math.isnan(v)]
    return len(values) >= 2 and all(b < a for a, b in zip(values, values[1:]))


def _bounded_spread(values: Sequence[float], spread: float) -> bool:
    """Finite positive values whose max / min stays within `spread`."""
    values = [v for v in values if not math.isnan(v)]
    if not values or min(values) <= 0 or any(math.isinf(v) for v in values):
        return False
    return max(values) / min(values) <= spread


def pad_coefficients(coeffs: np.ndarray, source: Basis, target: Basis) -> np.ndarray:
    """Re-index vector coefficients of `source` into `target` by mode multi-index (zeros elsewhere)."""
    coeffs = np.asarray(coeffs, dtype=float)
    d = source.vector_dim
    lead = coeffs.shape[:-1]
    out = np.zeros(lead + (d, target.n))
    blocks = coeffs.reshape(lead + (d, source.n))
    for i, k in enumerate(source.modes):
        j = target.mode_index(k)
        if j is not None:
            out[..., j] = blocks[..., i]
    return out.reshape(lead + (d * target.n,))


@dataclass
class _LevelPath:
    rho: np.ndarray
    rho_hat: np.ndarray
    m_hat: np.ndarray
    B_hat: np.ndarray


def _level_path(traj: Trajectory, basis: Basis, reference: Basis) -> _LevelPath:
    u_grid = reconstruct(traj.u, basis)
    m = np.expand_dims(traj.rho, 1) * u_grid
    return _LevelPath(
        rho=traj.rho,
        rho_hat=traj.rho.reshape(len(traj.rho), -1) @ reference.phi.T * reference.weight,
        m_hat=project(m, reference),
        B_hat=pad_coefficients(traj.B, basis, reference),
    )


def _weak_sup_distance(a: np.ndarray, b: np.ndarray, weights: np.ndarray) -> float:
    """sup_t of the H^-1-weighted coefficient distance."""
    steps = min(len(a), len(b))
    diff = a[:steps] - b[:steps]
    return float(np.max(np.sqrt(np.sum(diff**2 * weights, axis=-1))))


def convergence_study(
    config: RunConfig,
    parameter: str,
    levels: Optional[Sequence[float]] = None,
    paths: Optional[int] = None,
    ks: Sequence[float] = (1.0, 2.0, 4.0),
) -> StudyTable:
    """Self-convergence over one parameter ('n', 'eps' or 'delta') with coupled Brownian increments."""
    names = {"n": "n_schedule", "eps": "eps_schedule", "delta": "delta_schedule"}
    if parameter not in names:
        raise ScheduleError(f"unknown study parameter {parameter!r}; expected one of {sorted(names)}")
    levels = _check_schedule(levels if levels is not None else getattr(config, names[parameter]), parameter)
    paths = paths or min(config.ensemble_size, 8)
    n_ref = max(int(v) for v in levels) if parameter == "n" else config.n_per_axis
    reference = build_basis(config.domain, n_ref)
    w_scalar = 1.0 / (1.0 + reference.eigvals)
    w_vector = 1.0 / (1.0 + reference.vector_eigvals)
    theta = default_theta(config.params.gamma)

    rows = []
    previous: Optional[Dict[int, _LevelPath]] = None
    for value in levels:
        if parameter == "n":
            level = config.with_updates(n_per_axis=int(value))
        else:
            level = config.with_updates(params={parameter: value})
        basis, _ = setup(level)
        current: Dict[int, _LevelPath] = {}
        sup_energy, dissipation, integrability, mass_drift, delta_beta = [], [], [], [], []
        for i in range(paths):
            traj = run_path(level, path_seed(level.master_seed, i))
            if traj.aborted:
                logger.warning("%s-study: path %d aborted at %g: %s", parameter, i, value, traj.abort_reason)
                continue
            report = energy_report(traj, level.params, basis)
            sup_energy.append(report.sup_energy)
            dissipation.append(report.dissipation[-1])
            integrability.append(integrability_value(traj.rho, traj.dt, level.params, theta, basis.domain))
            mass_drift.append(float(np.max(np.abs(traj.mass - traj.mass[0])) / traj.mass[0]))
            beta_norms = np.sum(traj.rho**level.params.beta, axis=tuple(range(1, traj.rho.ndim))) * basis.weight
            delta_beta.append(level.params.delta * float(np.max(beta_norms)))
            current[i] = _level_path(traj, basis, reference)

        row = {
            "parameter": parameter,
            "value": value,
            "n_per_axis": level.n_per_axis,
            "eps": level.params.eps,
            "delta": level.params.delta,
            "paths": len(current),
        }
        for name, values in (
            ("sup_energy", sup_energy),
            ("dissipation", dissipation),
            ("integrability", integrability),
            ("delta_rho_beta", delta_beta),
        ):
            stats_ = mean_se(values)
            row[f"{name}_mean"], row[f"{name}_se"] = stats_["mean"], stats_["se"]
        row["mass_drift_max"] = max(mass_drift) if mass_drift else math.nan

        common = sorted(set(current) & set(previous)) if previous is not None else []
        distances = {"dist_rho": [], "dist_m": [], "dist_B": []}
        oscillations = {k: [] for k in ks}
        for i in common:
            a, b = current[i], previous[i]
            distances["dist_rho"].append(_weak_sup_distance(a.rho_hat, b.rho_hat, w_scalar))
            distances["dist_m"].append(_weak_sup_distance(a.m_hat, b.m_hat, w_vector))
            steps = min(len(a.B_hat), len(b.B_hat))
            distances["dist_B"].append(float(np.sqrt(config.dt * np.sum((a.B_hat[:steps] - b.B_hat[:steps]) ** 2))))
            for k in ks:
                oscillations[k].append(
                    oscillation_moment(a.rho, b.rho, k, config.params.gamma, config.domain, config.dt)
                )
        for name, values in distances.items():
            stats_ = mean_se(values)
            row[name], row[f"{name}_se"] = stats_["mean"], stats_["se"]
        for k, values in oscillations.items():
            row[f"osc_k{k:g}"] = mean_se(values)["mean"]
        rows.append(row)
        previous = current
        logger.info("%s-study level %g: %d paths", parameter, value, len(current))

    frame = pd.DataFrame(rows)
    criteria: Dict[str, bool] = {}
    if parameter in ("n", "delta"):
        for name in ("dist_rho", "dist_m", "dist_B"):
            criteria[f"{name}_decreasing"] = _strictly_decreasing(frame[name].tolist())
    if parameter == "delta":
        criteria["delta_rho_beta_decreasing"] = _strictly_decreasing(frame["delta_rho_beta_mean"].tolist())
        criteria["integrability_stable"] = _bounded_spread(frame["integrability_mean"].tolist(), INTEGRABILITY_SPREAD)
    if parameter == "eps":
        criteria["mass_conservation"] = bool(np.nanmax(frame["mass_drift_max"].to_numpy()) <= MASS_TOLERANCE)
    return StudyTable(parameter=parameter, frame=frame, criteria=criteria)


@dataclass(frozen=True)
class OrderFit:
    dts: np.ndarray
    errors: np.ndarray
    order: float
    intercept: float

    def as_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"dt": self.dts, "error": self.errors})


def fit_order(dts: Sequence[float], errors: Sequence[float]) -> OrderFit:
    dts = np.asarray(dts, dtype=float)
    errors = np.asarray(errors, dtype=float)
    mask = errors > 0
    if mask.sum() < 2:
        return OrderFit(dts=dts, errors=errors, order=math.nan, intercept=math.nan)
    fit = stats.linregress(np.log(dts[mask]), np.log(errors[mask]))
    return OrderFit(dts=dts, errors=errors, order=float(fit.slope), intercept=float(fit.intercept))


def strong_order_study(
    config: RunConfig,
    dt_values: Optional[Sequence[float]] = None,
    paths: int = 16,
    refinement: int = STRONG_ORDER_REFINEMENT,
) -> OrderFit:
    """RMS terminal (u, B) error against a dt_min / refinement reference on coupled Brownian paths."""
    dt_values = sorted(dt_values if dt_values is not None else config.dt_schedule, reverse=True)
    _check_schedule(dt_values, "dt", min_levels=2)
    dt_ref = dt_values[-1] / refinement
    fine_config = config.with_updates(dt=dt_ref)
    coarse_configs = [config.with_updates(dt=dt) for dt in dt_values]
    sq_errors = np.zeros(len(dt_values))
    used = 0
    for i in range(paths):
        seed = path_seed(config.master_seed, i)
        fine = sample_brownian(seed, config.params.K_modes, config.T, dt_ref)
        reference = run_path(fine_config, seed, brownian=fine, keep_density=False)
        if reference.aborted:
            continue
        ref_state = np.concatenate([reference.u[-1], reference.B[-1]])
        errors = []
        for dt, level in zip(dt_values, coarse_configs):
            traj = run_path(level, seed, brownian=fine.coarsen(int(round(dt / dt_ref))), keep_density=False)
            if traj.aborted:
                break
            errors.append(np.sum((np.concatenate([traj.u[-1], traj.B[-1]]) - ref_state) ** 2))
        else:
            sq_errors += np.asarray(errors)
            used += 1
    if used == 0:
        raise EnsembleFailure("strong-order study: every path aborted")
    fit = fit_order(dt_values, np.sqrt(sq_errors / used))
    logger.info("strong order %.3f over dt=%s (%d paths)", fit.order, dt_values, used)
    return fit


def strong_order_profile(config: RunConfig) -> RunConfig:
    """Setting in which the multiplicative noise dominates the drift error at the schedule's dt.

    Two modes per axis, a short horizon, the m- and B-proportional amplitudes raised and
    the stopping and cut-off levels lifted out of reach.
    """
    noise = {
        "f2_amplitude": config.noise.f2_amplitude * STRONG_ORDER_NOISE,
        "g_amplitude": config.noise.g_amplitude * STRONG_ORDER_NOISE,
    }
    return config.with_updates(
        n_per_axis=2, T=0.064, noise=noise, noise_on=True, params={"N_stop": 1e6, "N_cutoff": 1e6}
    )


def energy_order_study(
    config: RunConfig, dt_values: Optional[Sequence[float]] = None, refine_grid: bool = True
) -> OrderFit:
    """|energy residual(T)| of the noise-free problem over a dt sweep; with `refine_grid` h shrinks with dt."""
    dt_values = sorted(dt_values if dt_values is not None else config.dt_schedule, reverse=True)
    _check_schedule(dt_values, "dt", min_levels=2)
    base = config.with_updates(noise_on=False)
    residuals = []
    for dt in dt_values:
        changes = {"dt": dt}
        if refine_grid:
            scale = dt_values[-1] / dt
            floor = max(8, 2 * config.n_per_axis)
            grid = tuple(max(floor, 2 * int(round(g * scale / 2))) for g in config.domain.grid_pts)
            changes["domain"] = {"grid_pts": grid}
        level = base.with_updates(**changes)
        basis, _ = setup(level)
        traj = run_path(level, path_seed(level.master_seed, 0))
        if traj.aborted:
            raise EnsembleFailure(f"energy-order study: deterministic path aborted at dt={dt}: {traj.abort_reason}")
        residuals.append(abs(energy_report(traj, level.params, basis).final_residual))
    fit = fit_order(dt_values, residuals)
    logger.info("energy residual order %.3f over dt=%s", fit.order, dt_values)
    return fit


@dataclass
class SaturationStudy:
    frame: pd.DataFrame

    @property
    def monotone(self) -> bool:
        fractions = self.frame["fraction_tau_T"].to_numpy()
        return bool(np.all(np.diff(fractions) >= 0))

    @property
    def final_fraction(self) -> float:
        return float(self.frame["fraction_tau_T"].iloc[-1])


def stopping_saturation(
    config: RunConfig, N_values: Optional[Sequence[float]] = None, paths: Optional[int] = None
) -> SaturationStudy:
    """Fraction of paths with tau = T for increasing stopping levels N (same seeds at every level)."""
    N_values = _check_schedule(N_values if N_values is not None else config.N_schedule, "N", min_levels=2)
    paths = paths or config.ensemble_size
    rows = []
    for N in N_values:
        level = config.with_updates(params={"N_stop": N})
        summaries = [s for s in map_paths(level, paths) if not s.aborted]
        flags = [float(s.tau_is_T) for s in summaries]
        fraction = mean_se(flags)
        rows.append({"N": N, "paths": len(flags), "fraction_tau_T": fraction["mean"], "fraction_tau_T_se": fraction["se"]})
    return SaturationStudy(frame=pd.DataFrame(rows))


def growth_samples(config: RunConfig, paths: int = 4, every: Optional[int] = None):
    """(rho, m, B) grid samples along a few paths, for the noise growth report."""
    basis, _ = setup(config)
    every = every or config.snapshot_every
    for i in range(paths):
        traj = run_path(config, path_seed(config.master_seed, i))
        for j in range(0, traj.steps + 1, every):
            rho = traj.rho[j]
            yield rho, rho * reconstruct(traj.u[j], basis), reconstruct(traj.B[j], basis)


def noise_validation(config: RunConfig, paths: int = 4) -> GrowthReport:
    _, noise = setup(config)
    report = validate_growth(noise, growth_samples(config, paths))
    logger.info("noise growth report: passed=%s", report.passed)
    return report
