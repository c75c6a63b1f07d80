# simulator/errors.py - Exception hierarchy

from typing import Optional


class SimulationError(Exception):
    """Base error. `detail` is shown to the user, `exit_code` is what the CLI returns."""

    exit_code = 1

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class ConfigError(SimulationError):
    exit_code = 2


class ShapeMismatchError(SimulationError, ValueError):
    pass


class AliasingError(SimulationError, ValueError):
    exit_code = 2


class CFLViolationError(SimulationError):
    def __init__(self, dt: float, admissible_dt: float):
        super().__init__(f"CFL violated: dt={dt:.3e} exceeds admissible dt={admissible_dt:.3e}")
        self.dt = dt
        self.admissible_dt = admissible_dt


class NegativeDensityError(SimulationError, ValueError):
    pass


class PositivityError(SimulationError):
    pass


class ContractionError(SimulationError):
    def __init__(self, kappa: float, dt: float):
        super().__init__(
            f"Picard iteration is not a contraction at dt={dt:.3e} (kappa={kappa:.3f}); reduce dt"
        )
        self.kappa = kappa
        self.dt = dt


class NonZeroMeanError(SimulationError, ValueError):
    pass


class InadmissibleExponentError(SimulationError, ValueError):
    exit_code = 2


class InsufficientPathsError(SimulationError):
    pass


class ScheduleError(SimulationError):
    exit_code = 2


class EnsembleFailure(SimulationError):
    pass
