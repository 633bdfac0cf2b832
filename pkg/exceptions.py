"""Error taxonomy shared by the engine, the pipeline modules, the CLI and the service."""


class CvmError(Exception):
    """Base class for every error raised by this project."""


class DimensionError(CvmError):
    """Operand shapes are incompatible."""


class ConfigurationError(CvmError):
    """A configuration value is invalid or unknown."""


class ContractError(CvmError):
    """A caller broke an API precondition (e.g. backward on a non-scalar)."""


class NumericError(CvmError):
    """Non-finite values or a numerical routine failed to converge."""


class ValidationError(CvmError):
    """Decoded data violates a domain invariant."""


class PaletteError(CvmError):
    """A label has no colour in the palette."""


class FormatError(CvmError):
    """A binary file is malformed.

    Args:
        message (str): Human readable description
        offset (int, optional): Byte offset where decoding failed
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TruncationError(FormatError):
    """Payload shorter than its header declares."""


class CheckpointError(CvmError):
    """Checkpoint content does not match what the caller expects."""

    def __init__(self, message, parameter=None):
        super().__init__(message)
        self.parameter = parameter


class DataError(CvmError):
    """A sample carries an invalid class id."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class UndefinedMetricError(CvmError):
    """A metric is undefined for the given confusion matrix."""
