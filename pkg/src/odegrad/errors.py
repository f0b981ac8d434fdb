"""Exception hierarchy shared by every odegrad module."""


class OdeGradError(Exception):
    """Base class for all errors raised by odegrad."""


class DimensionError(OdeGradError, ValueError):
    """An array has the wrong shape for the operation."""


class NonFiniteError(OdeGradError, ValueError):
    """A NaN or infinity reached an operation that requires finite input."""


class StaleTapeError(OdeGradError):
    """A tape was replayed against a field whose parameters changed since recording."""


class SpanError(OdeGradError, ValueError):
    """A query time lies outside the span of a solution or interpolant."""


class ConfigError(OdeGradError, ValueError):
    """Invalid solver, method or experiment configuration."""


class SolverError(OdeGradError):
    """The ODE solver could not complete.

    ``partial`` holds the accepted steps computed before the failure
    (a :class:`~odegrad.ode.DenseSolution`, or ``None`` when no step was taken).
    """

    def __init__(self, message, partial=None, step=None, t=None):
        super().__init__(message)
        self.partial = partial
        self.step = step
        self.t = t


class MaxStepsExceeded(SolverError):
    pass


class StepSizeTooSmall(SolverError):
    pass


class NonFiniteStateError(SolverError):
    pass
