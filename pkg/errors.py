"""
Exceptions raised by the verification pipeline
"""


class PrekopaError(Exception):
    """Base class for every failure raised by the verifier"""


class DomainError(PrekopaError):
    """Invalid domain parameters or a point that is not where it should be"""


class MeshResolutionError(PrekopaError):
    """Grid too coarse for the requested stencil"""


class OutsideValidityError(PrekopaError):
    """A field was evaluated outside its declared (t, x) validity box"""


class MeasureError(PrekopaError):
    """Non-positive field values or a non-finite partition function"""


class DegenerateWeightsError(PrekopaError):
    """Zero, negative or non-finite face coefficients in the weak system"""


class IncompatibleDataError(PrekopaError):
    """Right-hand side violates the Neumann compatibility condition"""


class SolverConvergenceError(PrekopaError):
    """Linear solve did not reach the requested residual"""


class BoundaryConditionError(PrekopaError):
    """Reconstructed normal derivative too large for the boundary term"""


class HypothesisError(PrekopaError):
    """Parameters violate a hypothesis of the statement being checked"""


class ConfigError(PrekopaError):
    """Malformed or inconsistent run configuration"""


class StageError(PrekopaError):
    """Failure inside a pipeline, tagged with the stage and the time value"""

    def __init__(self, stage, t, cause):
        self.stage = stage
        self.t = t
        self.cause = cause
        super().__init__(f"stage '{stage}' failed at t={t!r}: {type(cause).__name__}: {cause}")

    def __reduce__(self):
        return (type(self), (self.stage, self.t, self.cause))


class ClampWarning(UserWarning):
    """The positive part (a)_+ of a large-beta integrand base was clamped at some node"""
