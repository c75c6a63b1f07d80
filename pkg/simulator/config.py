# simulator/config.py - Run configuration, key=value config files and environment defaults

import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from simulator.basis import Domain
from simulator.errors import ConfigError
from simulator.galerkin import SimParams
from simulator.noise import NoiseSettings

# Load .env variables
load_dotenv()

logger = logging.getLogger(__name__)

DATABASE_URL = os.getenv("MHDSIM_DATABASE_URL", "sqlite:///./mhdsim_runs.db")
LOG_LEVEL = os.getenv("MHDSIM_LOG_LEVEL", "INFO")


def default_workers() -> int:
    try:
        return max(1, int(os.getenv("MHDSIM_WORKERS", "1")))
    except ValueError:
        return 1


class InitialData(BaseModel):
    """rho0 = mean + amplitude * prod cos(pi x_a / L_a); u0 and B0 are low-mode sine fields."""

    model_config = ConfigDict(frozen=True)

    rho_mean: float = 1.0
    rho_amplitude: float = 0.2
    u_amplitude: float = 0.5
    B_amplitude: float = 0.5

    @model_validator(mode="after")
    def check_density(self):
        if self.rho_mean <= 0:
            raise ValueError("initial mean density must be positive")
        if abs(self.rho_amplitude) > self.rho_mean:
            raise ValueError("initial density amplitude must not exceed the mean (ρ0 ≥ 0)")
        return self


def _check_monotone(values: List[float], name: str) -> List[float]:
    if len(values) < 1:
        raise ValueError(f"{name} must not be empty")
    diffs = [b - a for a, b in zip(values, values[1:])]
    if not (all(x > 0 for x in diffs) or all(x < 0 for x in diffs)):
        raise ValueError(f"{name} must be strictly monotone")
    return values


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    params: SimParams = Field(default_factory=SimParams)
    domain: Domain = Field(default_factory=Domain)
    noise: NoiseSettings = Field(default_factory=NoiseSettings)
    initial: InitialData = Field(default_factory=InitialData)
    noise_on: bool = True
    n_per_axis: int = 4
    dt: float = 1e-3
    T: float = 0.5
    ensemble_size: int = 200
    master_seed: int = 0
    n_schedule: List[int] = [2, 4, 8]
    eps_schedule: List[float] = [1e-2, 1e-3, 1e-4]
    delta_schedule: List[float] = [1e-2, 1e-3, 1e-4]
    N_schedule: List[float] = [1.0, 3.0, 10.0, 30.0]
    dt_schedule: List[float] = [4e-3, 2e-3, 1e-3]
    snapshot_every: int = 10
    output_dir: str = "mhdsim_out"
    workers: int = Field(default_factory=default_workers)

    @field_validator("n_schedule", "eps_schedule", "delta_schedule", "N_schedule", "dt_schedule")
    @classmethod
    def check_schedule(cls, v, info):
        return _check_monotone(list(v), info.field_name)

    @model_validator(mode="after")
    def check_run(self):
        if self.n_per_axis < 1:
            raise ValueError("n_per_axis must be at least 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.T < self.dt:
            raise ValueError("T must be at least dt")
        if abs(self.T / self.dt - round(self.T / self.dt)) > 1e-9 * (self.T / self.dt):
            raise ValueError("T must be an integer multiple of dt")
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be at least 1")
        if self.master_seed < 0:
            raise ValueError("master_seed must be nonnegative")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be at least 1")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        return self

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def noise_settings(self) -> NoiseSettings:
        return self.noise if self.noise_on else self.noise.scaled(0.0)

    def with_updates(self, **changes) -> "RunConfig":
        """Re-validated copy; `params`, `domain`, `noise`, `initial` accept partial dicts."""
        data = self.model_dump(by_alias=True)
        for key, value in changes.items():
            if key in ("params", "domain", "noise", "initial") and isinstance(value, dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
        return build_config(data)


# Flat config-file keys and where they live in RunConfig.
_SECTIONS = {
    "params": set(SimParams.model_fields) | {"lambda"},
    "domain": {"dim", "lengths", "grid_pts"},
    "noise": set(NoiseSettings.model_fields),
    "initial": set(InitialData.model_fields),
}
_LIST_KEYS = {"lengths", "grid_pts", "n_schedule", "eps_schedule", "delta_schedule", "N_schedule", "dt_schedule"}


def _parse_scalar(token: str) -> Any:
    token = token.strip()
    lowered = token.lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    if lowered in ("pi", "π"):
        return math.pi
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        return token


def parse_config_text(text: str) -> Dict[str, Any]:
    """Parse `key = value` lines ('#' starts a comment) into a flat dict."""
    values: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"config line {lineno}: empty key")
        if key in _LIST_KEYS or "," in value:
            values[key] = [_parse_scalar(v) for v in value.split(",") if v.strip()]
        else:
            values[key] = _parse_scalar(value)
    return values


def nest(flat: Dict[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {section: {} for section in _SECTIONS}
    for key, value in flat.items():
        for section, keys in _SECTIONS.items():
            if key in keys:
                nested[section][key] = value
                break
        else:
            if key not in RunConfig.model_fields:
                raise ConfigError(f"unknown config key {key!r}")
            nested[key] = value
    return nested


def _format_validation(exc: ValidationError) -> str:
    messages = []
    for err in exc.errors():
        msg = err.get("msg", "")
        if msg.startswith("Value error, "):
            msg = msg[len("Value error, "):]
        loc = ".".join(str(part) for part in err.get("loc", ()))
        messages.append(f"{loc}: {msg}" if loc else msg)
    return "; ".join(messages)


def build_config(data: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from exc


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Defaults < config file < overrides (flat keys, None values ignored)."""
    flat: Dict[str, Any] = {}
    if path:
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigError(f"config file not found: {path}")
        flat.update(parse_config_text(config_path.read_text(encoding="utf-8")))
    flat.update({k: v for k, v in (overrides or {}).items() if v is not None})
    dim = flat.get("dim")
    if dim is not None:
        # lengths / grid_pts given for another dimension are re-broadcast from their first entry
        for key in ("lengths", "grid_pts"):
            value = flat.get(key)
            if isinstance(value, list) and len(value) != dim:
                flat[key] = value[:1]
    config = build_config(nest(flat))
    logger.debug("loaded config %s", config.model_dump_json())
    return config
