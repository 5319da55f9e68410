"""Exception hierarchy shared across the package."""


class BasisPruneError(Exception):
    """Base class for all package errors."""


class InvalidInput(BasisPruneError, ValueError):
    pass


class InvalidConfig(BasisPruneError, ValueError):
    pass


class DomainError(BasisPruneError, ValueError):
    """A formula was evaluated outside the region where it is defined."""


class NumericalFailure(BasisPruneError, ArithmeticError):
    def __init__(self, message, probe_index=None):
        super().__init__(message)
        self.probe_index = probe_index


class PerturbationTooLarge(NumericalFailure):
    pass


class InsufficientSpectrum(BasisPruneError, ValueError):
    pass


class CheckpointError(BasisPruneError, IOError):
    pass


class CorruptHeader(CheckpointError):
    pass


class TruncatedPayload(CheckpointError):
    def __init__(self, message, tensor=None):
        super().__init__(message)
        self.tensor = tensor


class UnknownVersion(CheckpointError):
    pass
