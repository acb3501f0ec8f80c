"""Exception types shared across the package."""


class PositivityLost(ArithmeticError):
    """A matrix that must be symmetric positive definite failed to factorize.

    ``index`` identifies the offending mixture component when known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class UnsupportedForm(TypeError):
    """The target has no nonlinear least-squares representation."""


class CFLViolation(ValueError):
    """The configured time step violates the advective stability bound."""


class ForwardMapError(RuntimeError):
    """Evaluation of a forward map failed for a given mixture component."""

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class ConfigError(ValueError):
    """An experiment configuration could not be parsed or validated."""
