"""Exception taxonomy shared across the package.

Every failure mode named by the public API maps to one of these. The CLI
translates ConfigError to exit code 2, file problems to 3, and everything
else that means "ran but failed" to 1.
"""


class ConfigError(ValueError):
    """Bad configuration value or inconsistent config combination."""


class DimensionError(ValueError):
    """Shape mismatch. Message must name both offending shapes."""


class DataError(ValueError):
    """Malformed dataset content (bad token id, label out of range, ...)."""


class StateError(RuntimeError):
    """Operation applied in the wrong order (e.g. backward on a consumed tape)."""


class CalibrationError(RuntimeError):
    """Noise calibration could not land in the requested epsilon window."""


class LeakError(RuntimeError):
    """Ledger found live non-persistent tensors after a run finished."""


class TrainingDiverged(RuntimeError):
    """Loss became NaN or inf; the run is aborted with diagnostics."""
