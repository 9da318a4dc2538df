"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with inputs outside its documented domain."""


class DivergenceError(RuntimeError):
    """A trajectory left the finite floating-point range.

    Attributes
    ----------
    member : int or None
        Index of the first offending ensemble member (None for single states).
    step : int
        Substep index (within the current call) at which it was detected.
    time : float
        Model time at the end of the offending substep.
    where : str
        Phase in which it happened (e.g. "forecast").
    """

    def __init__(self, member, step, time, where=""):
        self.member = member
        self.step = step
        self.time = time
        self.where = where
        msg = f"non-finite state at t={time:.6g} (substep {step}"
        if member is not None:
            msg += f", member {member}"
        msg += ")"
        if where:
            msg = f"{where}: {msg}"
        super().__init__(msg)


class SingularCovarianceError(ValueError):
    """The empirical state covariance cannot be inverted."""


class StabilityError(RuntimeError):
    """An explicit time step is too large for the operator being integrated."""

    def __init__(self, message, suggested_dt=None):
        self.suggested_dt = suggested_dt
        if suggested_dt is not None:
            message = f"{message}; try dt <= {suggested_dt:.3g}"
        super().__init__(message)
