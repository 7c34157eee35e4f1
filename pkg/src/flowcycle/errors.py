"""Exception taxonomy shared across the package.

Exit-code mapping in the CLI: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class FlowcycleError(Exception):
    """Base class for all package errors."""


class ConfigError(FlowcycleError):
    """Bad configuration: unknown key, unparsable value, invalid combination."""


class DataError(FlowcycleError):
    """Bad or missing on-disk data."""


class MissingFrameError(DataError):
    """A clip directory has a gap in its frame index sequence."""


class DimensionMismatchError(DataError):
    """Files in a clip directory disagree on spatial dimensions."""


class CorruptFlowError(DataError):
    """A .flo file does not start with the expected magic number."""


class NumericError(FlowcycleError):
    """A non-finite value surfaced where a finite one is required."""
