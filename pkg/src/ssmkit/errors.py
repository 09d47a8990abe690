"""Exception hierarchy."""


class SSMError(Exception):
    """Base class for all errors raised by ssmkit."""


class DimensionMismatchError(SSMError, ValueError):
    pass


class DtypeMismatchError(SSMError, TypeError):
    pass


class NotPositiveSemidefiniteError(SSMError, ValueError):
    """A covariance failed the PSD check; ``eigenvalue`` is the offending minimum."""

    def __init__(self, what, eigenvalue):
        self.what = what
        self.eigenvalue = float(eigenvalue)
        super().__init__(f"{what} is not positive semi-definite (min eigenvalue {self.eigenvalue:.3e})")


class SingularInnovationError(SSMError, ArithmeticError):
    def __init__(self, step=None):
        self.step = step
        where = "" if step is None else f" at step {step}"
        super().__init__(f"innovation covariance is singular{where}")


class ImpossibleObservationError(SSMError, ArithmeticError):
    def __init__(self, step=None):
        self.step = step
        where = "" if step is None else f" at step {step}"
        super().__init__(f"observation impossible under model{where}")


class DegenerateEnsembleError(SSMError, ArithmeticError):
    """Every particle weight is zero."""

    def __init__(self, step=None):
        self.step = step
        where = "" if step is None else f" at step {step}"
        super().__init__(f"degenerate particle ensemble: all log-weights are -inf{where}")


class ModelEvaluationError(SSMError):
    """Wraps an exception raised by user model code inside a filter step."""

    def __init__(self, step, particle=None):
        self.step = step
        self.particle = particle
        msg = f"model evaluation failed at step {step}"
        if particle is not None:
            msg += f" (particle {particle})"
        super().__init__(msg)


class ConfigError(SSMError, ValueError):
    """Malformed or incomplete run configuration."""
