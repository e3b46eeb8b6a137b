"""Exception hierarchy shared across the package."""


class PdeDnnError(Exception):
    """Base class for all package errors."""


class DimensionError(PdeDnnError, ValueError):
    """Operand shapes do not satisfy an operation's dimensional contract."""


class NumericalError(PdeDnnError):
    """A numerical procedure broke down (non-convergence, non-finite values)."""


class SingularMatrixError(NumericalError):
    """An exactly singular pivot was met during a factorization."""


class ConvergenceError(NumericalError):
    """An iterative method hit its iteration cap.

    Attributes
    ----------
    residual : float
        Relative residual reached at the last iterate.
    iterations : int
        Number of iterations performed.
    """

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class DomainError(PdeDnnError, ValueError):
    """A parameter lies outside its admissible box."""


class ConfigError(PdeDnnError, ValueError):
    """Invalid experiment configuration."""


class MissingArtifactError(PdeDnnError, FileNotFoundError):
    """A persisted artifact required by a stage is absent."""


class TrainingAbort(NumericalError):
    """Training stopped because too many reduced solves needed regularization."""
