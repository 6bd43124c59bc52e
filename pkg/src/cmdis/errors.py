"""Exception types shared across the package."""


class CmdisError(Exception):
    """Base class for all package errors."""


class ConfigError(CmdisError, ValueError):
    """Invalid schedule, solver or experiment configuration."""


class ShapeError(CmdisError, ValueError):
    """Input array has the wrong trailing dimension."""


class OrderingError(CmdisError, ValueError):
    """Noise levels passed in the wrong order."""


class TargetError(CmdisError, ValueError):
    """Measurement target does not match the operator output."""


class IntegrationError(CmdisError, RuntimeError):
    """The probability-flow integration produced a non-finite state."""

    def __init__(self, sigma: float, message: str = "non-finite state"):
        super().__init__(f"{message} at sigma={sigma:.6g}")
        self.sigma = sigma


class SolverDivergence(CmdisError, RuntimeError):
    """A solver state became non-finite or left the safe ball."""

    def __init__(self, step: int, message: str = "state diverged"):
        super().__init__(f"{message} at step {step}")
        self.step = step


class TrainingError(CmdisError, RuntimeError):
    """Operator network training diverged."""
