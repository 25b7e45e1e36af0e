"""Exception types raised across the package."""


class CNIError(Exception):
    """Base class for all package errors."""


class DimensionError(CNIError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(CNIError, ValueError):
    """A precondition on arguments was violated."""


class GraphStateError(CNIError, RuntimeError):
    """The differentiation graph is in a state that forbids the request."""


class SizeError(CNIError, ValueError):
    """A dense materialization would exceed the configured cap."""


class FormatError(CNIError, ValueError):
    """A binary file is malformed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(CNIError, RuntimeError):
    """Training diverged or produced a non-finite loss."""
