"""
Domain errors raised by the koopman services.

All of them are ValueErrors so callers that only care about "bad input or
numerics" can keep catching ValueError.
"""


class KalikoError(ValueError):
    """Base class for every error raised by the koopman app."""


class SingularMatrix(KalikoError):
    """A symmetric positive-definite solve hit a vanishing pivot."""

    def __init__(self, message, timestep=None):
        if timestep is not None:
            message = f"{message} (at timestep {timestep})"
        super().__init__(message)
        self.timestep = timestep


class InsufficientData(KalikoError):
    """A trajectory or context is too short for the requested operation."""


class DivergenceError(KalikoError):
    """Numerical integration left the bounded region."""


class OrbitNotFound(KalikoError):
    """No closed orbit was detected within the integration budget."""


class NonFiniteValue(KalikoError):
    """A forward op produced NaN or Inf (autodiff debug mode)."""


class NonFiniteGradient(KalikoError):
    """Backpropagation produced NaN or Inf for a parameter."""

    def __init__(self, parameter_name):
        super().__init__(f"Non-finite gradient for parameter '{parameter_name}'")
        self.parameter_name = parameter_name


class TrainingDiverged(KalikoError):
    """Training hit a NaN loss or gradient; the last good state was saved."""

    def __init__(self, step, checkpoint_path=None, reason=''):
        message = f"Training diverged at step {step}"
        if reason:
            message = f"{message}: {reason}"
        if checkpoint_path:
            message = f"{message}; last good checkpoint: {checkpoint_path}"
        super().__init__(message)
        self.step = step
        self.checkpoint_path = checkpoint_path


class CheckpointError(KalikoError):
    """A checkpoint file is malformed or does not match the model."""


class ConvergenceError(KalikoError):
    """The eigensolver failed or returned pairs with an excessive residual."""


class DefectiveEigenpair(KalikoError):
    """Left and right eigenvectors are (numerically) orthogonal."""


class WindingUndefined(KalikoError):
    """A trace passes through zero so its winding number is undefined."""


class EigenIndexError(KalikoError):
    """The requested eigenpair index is outside the spectrum."""
