"""Exception types. Each carries a stable ``code`` string used by the CLI and tests."""


class SteerError(Exception):
    code = "ERROR"


class ConfigError(SteerError, ValueError):
    """Raised by config validation; ``violations`` lists every problem found."""

    def __init__(self, code: str, violations: list[str]):
        self.code = code
        self.violations = list(violations)
        super().__init__(f"{code}: " + "; ".join(self.violations))


class NonFiniteError(SteerError, FloatingPointError):
    code = "NON_FINITE"


class NoConvergence(SteerError, RuntimeError):
    code = "NO_CONVERGENCE"


class ShapeMismatch(SteerError, ValueError):
    code = "SHAPE_MISMATCH"


class CorruptBlob(SteerError, ValueError):
    code = "CORRUPT_BLOB"


class TooFewPoints(SteerError, ValueError):
    code = "TOO_FEW_POINTS"


class WindowEmpty(SteerError, ValueError):
    code = "WINDOW_EMPTY"


class ChannelClosed(SteerError, RuntimeError):
    code = "CLOSED"


class CorruptStream(SteerError, ValueError):
    code = "CORRUPT_STREAM"


class Deadlock(SteerError, RuntimeError):
    code = "DEADLOCK"


class NoTasks(SteerError, ValueError):
    code = "NO_TASKS"


class MismatchedWorkloads(SteerError, ValueError):
    code = "MISMATCHED_WORKLOADS"


class MissingReference(SteerError, FileNotFoundError):
    code = "MISSING_REFERENCE"


class IOFailure(SteerError, OSError):
    code = "IO_FAILURE"
