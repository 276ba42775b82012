"""Exception hierarchy shared by every invarilab module."""


class InvarilabError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(InvarilabError):
    """Invalid model, transform or experiment configuration."""


class InputError(InvarilabError, ValueError):
    """Data that violates an operation's preconditions."""


class NumericError(InvarilabError, FloatingPointError):
    """A non-finite value appeared during a numerical operation."""


class FormatError(InvarilabError):
    """Malformed binary archive or checkpoint."""


class ParseError(ConfigError):
    """Unparseable transform spec or config document."""


class LineageError(InvarilabError):
    """A category partition that would break the nesting of its lineage."""


class CalibrationError(InvarilabError):
    """A parameter sweep that never crossed its accuracy threshold."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


class TrainingError(InvarilabError):
    """Training diverged; carries the statistics gathered so far."""

    def __init__(self, message, stats):
        super().__init__(message)
        self.stats = stats
