"""Exception types shared across the package.

The CLI maps these onto its stable exit codes: ConfigError -> 2,
DataError -> 3, NumericalError -> 4.
"""


class FlowSRError(Exception):
    """Base class for package errors."""


class ShapeError(FlowSRError):
    """Operand shapes violate an operation's contract."""


class NumericalError(FlowSRError):
    """An operation produced non-finite values, or training diverged."""


class SecondOrderError(FlowSRError):
    """create_graph backward requested through an unsupported operation."""


class ConfigError(FlowSRError):
    """Malformed or inconsistent run configuration."""


class DataError(FlowSRError):
    """Missing or malformed corpus data."""


class CheckpointError(FlowSRError):
    """Unreadable, corrupted, or mismatched checkpoint file."""


class TrainingError(FlowSRError):
    """Optimizer contract violation (e.g. missing gradient for a parameter)."""
