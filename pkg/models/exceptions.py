"""
Exception hierarchy for the relaxed-control solver
Every error carries the process exit code the command line reports for it
"""

from typing import Any, Dict, Optional


class SolverError(Exception):
    """Base exception for solver operations"""

    exit_code: int = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ConfigError(SolverError):
    """Configuration file could not be parsed or validated"""

    exit_code = 2


class ProblemDefinitionError(SolverError):
    """Problem coefficients violate the structural requirements"""

    exit_code = 2


class ShapeMismatchError(SolverError):
    """Controls, grids or noise bundles do not fit together"""

    exit_code = 2


class StorageError(SolverError):
    """Reading or writing an artifact failed"""

    exit_code = 4


class NumericalAbort(SolverError):
    """
    A non-finite value appeared during a computation

    Attributes:
        location (Dict[str, Any]): Where it happened (any of s, j, k, i)
    """

    exit_code = 3

    def __init__(self, stage: str, location: Optional[Dict[str, Any]] = None):
        self.stage = stage
        self.location = dict(location or {})
        where = ", ".join(f"{key}={value}" for key, value in self.location.items())
        super().__init__(f"non-finite value in {stage}" + (f" at {where}" if where else ""))

    def at(self, **extra: Any) -> "NumericalAbort":
        """Return a copy with extra location keys (e.g. the algorithmic time s)"""
        return NumericalAbort(self.stage, {**extra, **self.location})
