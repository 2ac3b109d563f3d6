"""Exception types raised across the package."""


class DmimoError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(DmimoError, ValueError):
    pass


class NonSquareRuCount(DmimoError, ValueError):
    pass


class NegativeSinr(DmimoError, ValueError):
    pass


class ZeroPower(DmimoError, ValueError):
    pass


class DegenerateStd(DmimoError, ValueError):
    pass


class IndexOutOfRange(DmimoError, IndexError):
    pass


class EmptySamples(DmimoError, ValueError):
    pass


class SolverFailure(DmimoError, RuntimeError):
    """A labeling solve failed; ``beta`` holds the offending channel matrix."""

    def __init__(self, message, beta=None):
        super().__init__(message)
        self.beta = beta


class NoConvergence(SolverFailure):
    pass


class InfeasibleModel(SolverFailure):
    pass


class InnerNoConvergence(SolverFailure):
    pass


class DivergedLoss(DmimoError, FloatingPointError):
    pass


class DegenerateSpectrum(DmimoError, ArithmeticError):
    pass
