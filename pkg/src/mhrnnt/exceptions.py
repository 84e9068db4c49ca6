"""Exception hierarchy shared across the package.

The CLI maps each family to its own exit code, so raise the most specific
class that applies.
"""


class MHRNNTError(Exception):
    """Base class for all package errors."""


class ContractViolation(MHRNNTError, ValueError):
    """Caller broke a precondition (shape mismatch, empty input, ...)."""


class ValidationError(MHRNNTError, ValueError):
    """Input data failed a content check (normalization, label range, ...)."""


class LatticeTooLarge(ContractViolation):
    """Brute-force enumeration refused because the lattice is too big."""


class DivergenceError(MHRNNTError, FloatingPointError):
    """Training produced a non-finite loss or gradient.

    ``payload`` carries whatever diagnostic context the raiser had at hand.
    """

    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = dict(payload or {})


class PairingError(MHRNNTError, KeyError):
    """Utterance ids failed to pair up between two collections."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DataFormatError(MHRNNTError, OSError):
    """A file on disk does not parse as the expected format."""


class CheckpointError(DataFormatError):
    """Base for checkpoint read failures."""


class CorruptCheckpoint(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


class CheckpointVersionMismatch(CheckpointError):
    pass


class IncompleteRecord(MHRNNTError, ValueError):
    """An experiment record lacks what a report needs."""
