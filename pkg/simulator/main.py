# simulator/main.py - Command-line entry point

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from simulator.config import LOG_LEVEL, RunConfig, load_config
from simulator.db import record_run
from simulator.errors import ConfigError, SimulationError
from simulator.export import export_csv, export_json, output_paths, to_jsonable

logger = logging.getLogger(__name__)

STUDIES = ("n", "eps", "delta", "flux-eps", "flux-delta", "strong-order", "energy-order", "stopping")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mhdsim",
        description="Stochastic compressible MHD Galerkin simulator and diagnostics suite",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, dest="master_seed", help="master seed")
    common.add_argument("--out", dest="output_dir", help="output directory")
    common.add_argument("--paths", type=int, dest="ensemble_size", help="number of paths")
    common.add_argument("--dt", type=float, help="time step")
    common.add_argument("--T", type=float, help="final time")
    common.add_argument("--n", type=int, dest="n_per_axis", help="Galerkin modes per axis")
    common.add_argument("--eps", type=float, help="artificial viscosity")
    common.add_argument("--delta", type=float, help="artificial pressure coefficient")
    common.add_argument("--dim", type=int, help="space dimension (2 or 3)")
    common.add_argument("--workers", type=int, help="worker processes")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="run one ensemble")
    study = sub.add_parser("study", parents=[common], help="run a limit study")
    study.add_argument("parameter", choices=STUDIES)
    sub.add_parser("validate-noise", parents=[common], help="noise growth report")
    selftest = sub.add_parser("selftest", parents=[common], help="full invariant battery")
    selftest.add_argument("--full", action="store_true", help="use the configured horizon and ensemble size")
    selftest.add_argument("--only", action="append", help="run only the named check group (repeatable)")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    keys = ("master_seed", "output_dir", "ensemble_size", "dt", "T", "n_per_axis", "eps", "delta", "dim", "workers")
    overrides = {key: getattr(args, key, None) for key in keys}
    return load_config(args.config, overrides)


def _simulate(config: RunConfig) -> dict:
    from analysis.montecarlo import run_ensemble

    result = run_ensemble(config)
    print(f"{result.report['paths']} paths, {result.report['aborted']} aborted, passed={result.passed}")
    return result.report


def _study(config: RunConfig, parameter: str) -> dict:
    from analysis import montecarlo
    from analysis.diagnostics import flux_pairing_study

    out = output_paths(config.output_dir)
    if parameter in ("n", "eps", "delta"):
        table = montecarlo.convergence_study(config, parameter)
        frame, passed, extra = table.frame, table.passed, {"criteria": table.criteria}
    elif parameter.startswith("flux-"):
        flux = flux_pairing_study(config, parameter.split("-", 1)[1])
        frame, passed, extra = flux.frame, flux.passed, {"k": flux.k}
    elif parameter == "stopping":
        saturation = montecarlo.stopping_saturation(config)
        frame, passed = saturation.frame, saturation.monotone
        extra = {"final_fraction": saturation.final_fraction}
    elif parameter == "strong-order":
        fit = montecarlo.strong_order_study(montecarlo.strong_order_profile(config))
        lo, hi = montecarlo.STRONG_ORDER_RANGE
        frame, passed, extra = fit.as_frame(), bool(lo <= fit.order <= hi), {"order": fit.order}
    else:
        fit = montecarlo.energy_order_study(config)
        passed = bool(fit.order >= montecarlo.ENERGY_ORDER_MIN)
        frame, extra = fit.as_frame(), {"order": fit.order}
    export_csv(frame, out["study"])
    report = {"study": parameter, "passed": passed, **extra, "config": montecarlo.config_record(config)}
    export_json(report, out["report"])
    print(frame.to_string(index=False))
    return report


def _validate_noise(config: RunConfig) -> dict:
    from analysis.montecarlo import noise_validation

    growth = noise_validation(config)
    report = {"command": "validate-noise", **growth.as_dict()}
    export_json(report, output_paths(config.output_dir)["report"])
    print(f"noise growth assumptions: {'satisfied' if growth.passed else 'VIOLATED'}")
    return report


def _selftest(config: RunConfig, full: bool, only: Optional[List[str]]) -> dict:
    from analysis.selftest import run_selftest

    result = run_selftest(config, quick=not full, only=only)
    frame = result.to_frame()
    out = output_paths(config.output_dir)
    export_csv(frame, Path(config.output_dir) / "selftest.csv")
    report = {"command": "selftest", "passed": result.passed, "checks": result.checks}
    export_json(report, out["report"])
    failed = frame[~frame["passed"]] if len(frame) else frame
    print(f"{len(frame) - len(failed)}/{len(frame)} checks passed")
    for _, row in failed.iterrows():
        print(f"  FAILED [{row['group']}] {row['name']}: {row['statistic']:.4g} (threshold {row['threshold']:g})")
    return report


def _config_json(config: RunConfig) -> dict:
    return to_jsonable(config.model_dump(mode="json", by_alias=True))


def cli(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run the command and return its exit code (0 pass, 1 failure, 2 bad config)."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=LOG_LEVEL.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        config = config_from_args(args)
    except ConfigError as exc:
        print(f"configuration error: {exc.detail}", file=sys.stderr)
        return exc.exit_code

    try:
        if args.command == "simulate":
            report = _simulate(config)
        elif args.command == "study":
            report = _study(config, args.parameter)
        elif args.command == "validate-noise":
            report = _validate_noise(config)
        else:
            report = _selftest(config, args.full, args.only)
    except SimulationError as exc:
        logger.error("%s failed: %s", args.command, exc.detail)
        print(f"error: {exc.detail}", file=sys.stderr)
        record_run(args.command, config.master_seed, _config_json(config), 0, [], False, config.output_dir, {"error": exc.detail})
        return exc.exit_code

    passed = bool(report.get("passed", False))
    aborts = report.get("aborts", [])
    record_run(
        args.command,
        config.master_seed,
        _config_json(config),
        int(report.get("paths", 0)),
        aborts,
        passed,
        config.output_dir,
        to_jsonable(report),
    )
    return 0 if passed else 1


if __name__ == "__main__":
    sys.exit(cli())
