"""Exception hierarchy.

Validation errors map to CLI exit code 2, numerical failures to exit code 3.
"""


class RegFPError(Exception):
    """Base class for all package errors."""


class ValidationError(RegFPError, ValueError):
    """Input violates a documented precondition."""


class NumericalError(RegFPError, ArithmeticError):
    """Computation cannot produce a meaningful result for valid input."""


class InvalidInput(ValidationError):
    pass


class InsufficientReplicates(ValidationError):
    pass


class InvalidEigenvalue(ValidationError):
    pass


class InvalidBandwidthExponent(ValidationError):
    pass


class LayoutMismatch(ValidationError):
    pass


class BandwidthTooLarge(NumericalError):
    """Kernel bandwidth ``h >= 1/2``; the replicate count is too small for gamma."""


class DegenerateEnsemble(NumericalError):
    pass


class DegenerateGridbox(NumericalError):
    pass


class SingularDesign(NumericalError):
    pass


class SingularWeight(NumericalError):
    pass


class NoFiniteSolution(NumericalError):
    """TLS solution lies at infinity (last eigenvector component vanishes)."""


class DegenerateTies(NumericalError):
    """Two smallest eigenvalues of the augmented matrix coincide."""


class InvalidFit(NumericalError):
    pass


class CalibrationFailed(NumericalError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class ExperimentUnstable(NumericalError):
    pass
