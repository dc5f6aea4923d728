"""Exception types shared across the package."""


class PoseTransferError(Exception):
    """Base class for all package errors."""


class AnnotationError(PoseTransferError):
    """Malformed or out-of-contract annotation data."""


class DimensionError(PoseTransferError):
    """Tensor/array shapes incompatible with an operation."""


class ConfigError(PoseTransferError):
    """Invalid configuration value or unknown config key."""


class IngestionError(PoseTransferError):
    """Dataset files missing, unreadable, or inconsistent.

    ``problems`` carries one message per offending record so a bad pair
    index can be reported in full rather than failing on the first row.
    """

    def __init__(self, message, problems=None):
        super().__init__(message)
        self.problems = list(problems) if problems else []


class ProtocolError(PoseTransferError):
    """Evaluation inputs violate the metric's protocol."""


class NumericError(PoseTransferError):
    """Non-finite values where finite ones are required."""


class TrainingDiverged(PoseTransferError):
    """A loss or parameter became non-finite during training."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics) if diagnostics else {}
