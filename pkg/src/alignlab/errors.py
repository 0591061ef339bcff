"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code (see cli.EXIT_CODES).
"""


class AlignlabError(Exception):
    """Base class for all package errors."""


class ConfigError(AlignlabError):
    """Invalid configuration (bad shapes, impossible mixes, bad CLI input)."""


class DimensionError(AlignlabError):
    """Array shape mismatch; message names both shapes."""


class DomainError(AlignlabError):
    """Input value outside the operation's domain."""


class DataFormatError(AlignlabError):
    """Malformed dataset/checkpoint file (bad header, truncation, checksum)."""


class DivergenceError(AlignlabError):
    """Non-finite loss or gradient during training."""


class UsageError(AlignlabError):
    """API called out of order (e.g. backward without a forward cache)."""


class UndefinedMetricError(AlignlabError):
    """A metric's preconditions are unmet (e.g. single-class AUC input)."""
