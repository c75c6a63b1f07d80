# simulator/export.py - Report, table and binary state export

import json
import logging
import math
import struct
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
import pandas as pd

from simulator.basis import Domain
from simulator.noise import BrownianPaths
from simulator.stepper import State
from simulator.transport import DensityField

logger = logging.getLogger(__name__)

STATE_MAGIC = b"MHDS"
STATE_VERSION = 1
CSV_FLOAT_FORMAT = "%.12g"

PathLike = Union[str, Path]


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars/arrays and non-finite floats into JSON-serializable values."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if hasattr(value, "__float__"):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def export_json(data: Dict[str, Any], path: PathLike) -> Path:
    """Write a report as JSON with sorted keys; identical input gives identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_jsonable(data), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("wrote %s", path)
    return path


def export_csv(frame: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    logger.info("wrote %s (%d rows)", path, len(frame))
    return path


def dump_state(state: State, domain: Domain) -> bytes:
    """Little-endian restart dump: magic, version, dim, grid, coefficient length, t, stopped, theta, rho, u, B."""
    header = STATE_MAGIC + struct.pack("<II", STATE_VERSION, domain.dim)
    header += struct.pack(f"<{domain.dim}I", *domain.grid_pts)
    header += struct.pack("<I", state.u.size)
    stopped = math.nan if state.stopped is None else state.stopped
    header += struct.pack("<ddd", state.t, stopped, state.theta)
    body = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes() for a in (state.rho.values, state.u, state.B)
    )
    return header + body


def load_state(data: bytes, domain: Domain) -> State:
    if data[:4] != STATE_MAGIC:
        raise ValueError("not a state dump (bad magic)")
    offset = 4
    version, dim = struct.unpack_from("<II", data, offset)
    offset += 8
    if version != STATE_VERSION:
        raise ValueError(f"unsupported state dump version {version}")
    grid = struct.unpack_from(f"<{dim}I", data, offset)
    offset += 4 * dim
    if dim != domain.dim or tuple(grid) != domain.grid_shape:
        raise ValueError(f"state dump grid {grid} does not match domain grid {domain.grid_shape}")
    (coeff_len,) = struct.unpack_from("<I", data, offset)
    offset += 4
    t, stopped, theta = struct.unpack_from("<ddd", data, offset)
    offset += 24
    cells = int(np.prod(grid))
    arrays = np.frombuffer(data, dtype="<f8", offset=offset).astype(float)
    if arrays.size != cells + 2 * coeff_len:
        raise ValueError("state dump is truncated or has trailing data")
    rho = arrays[:cells].reshape(grid)
    u = arrays[cells:cells + coeff_len]
    B = arrays[cells + coeff_len:]
    return State(
        t=t,
        rho=DensityField(values=rho, cell_volume=domain.cell_volume),
        u=u,
        B=B,
        stopped=None if math.isnan(stopped) else stopped,
        theta=theta,
    )


def write_state(state: State, domain: Domain, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dump_state(state, domain))
    return path


def read_state(path: PathLike, domain: Domain) -> State:
    return load_state(Path(path).read_bytes(), domain)


def write_increments(brownian: BrownianPaths, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(brownian.to_bytes())
    return path


def read_increments(path: PathLike, seed: int, K: int, dt: float) -> BrownianPaths:
    return BrownianPaths.from_bytes(Path(path).read_bytes(), seed=seed, K=K, dt=dt)


def output_paths(output_dir: PathLike) -> Dict[str, Path]:
    root = Path(output_dir)
    return {
        "report": root / "report.json",
        "timeseries": root / "timeseries.csv",
        "study": root / "study.csv",
        "state": root / "final_state.bin",
    }