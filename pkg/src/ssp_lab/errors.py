"""Exception types shared across the package."""


class SspError(Exception):
    """Base class for all package errors."""


class MdpFormatError(SspError, ValueError):
    """An MDP or cost document could not be parsed or failed validation."""


class ImproperPolicy(SspError):
    """The policy does not reach the goal with probability one."""


class NoProperPolicy(SspError):
    """No policy of the MDP reaches the goal from every state."""


class SolverFailure(SspError):
    """A projection solver did not reach its tolerance."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class InfeasibleFloor(SolverFailure):
    """The floored decision set is empty."""


class DivisionHazard(SspError):
    """An estimator would divide a positive count by zero probability."""


class ParameterViolation(SspError, ValueError):
    """Construction parameters violate a required inequality."""


class InvalidCost(SspError, ValueError):
    """A cost value lies outside [0, 1] or is not finite."""
