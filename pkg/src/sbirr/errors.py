"""Exception types raised across the package."""


class SBIRRError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(SBIRRError, ValueError):
    pass


class SimulationDiverged(SBIRRError, FloatingPointError):
    """A simulated state became non-finite or exceeded the magnitude guard."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"simulation diverged at step {step}")


class DivergedFit(SBIRRError, FloatingPointError):
    """The reference-drift fit produced a non-finite loss."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


class RegressionError(SBIRRError, ArithmeticError):
    pass


class ProtocolError(SBIRRError, ValueError):
    """Data does not satisfy the train/validation protocol."""


class SchemaError(SBIRRError, ValueError):
    """A config or results file does not match its expected schema."""
