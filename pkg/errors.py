from config import EXIT_NUMERICAL, EXIT_VALIDATION


class LabError(Exception):
    """Base exception for the network laboratory."""

    code = "E_LAB"
    exit_status = EXIT_VALIDATION


class InvalidArgumentError(LabError, ValueError):
    """Raised when an argument violates an operation's preconditions."""

    code = "E_INVALID_ARGUMENT"


class UnsupportedOperationError(LabError):
    """Raised when an operation is not defined for the requested variant."""

    code = "E_UNSUPPORTED"


class ResourceLimitError(LabError):
    """Raised when a problem size exceeds an exact-computation limit."""

    code = "E_RESOURCE_LIMIT"


class ConfigError(InvalidArgumentError):
    """Raised for malformed experiment configs and results files."""

    code = "E_CONFIG"


class FitInfeasibleError(LabError):
    """Raised when a decay fit has too few usable points."""

    code = "E_FIT_INFEASIBLE"
    exit_status = EXIT_NUMERICAL


class TrainingDivergedError(LabError):
    """Raised when the student loss stops being finite."""

    code = "E_DIVERGED"
    exit_status = EXIT_NUMERICAL

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"Training diverged at epoch {epoch}")
