"""Exception types shared across the package.

Exit-code mapping for the CLI lives in `cli`; everything else raises these.
"""


class SplitnavError(Exception):
    """Base class for package-specific failures."""


class ConfigurationError(SplitnavError):
    """Invalid configuration, geometry, or file format."""


class MissingPrerequisiteError(SplitnavError):
    """A pipeline stage was asked to run before its inputs exist."""


class NumericFault(SplitnavError):
    """Non-finite values where finite ones are required."""


class TrainingFault(NumericFault):
    """Training produced or received a non-finite/invalid state."""


class WireError(SplitnavError):
    """Malformed frame or protocol violation on the wire."""
