"""Exception types shared across the package."""


class ExitwiseError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(ExitwiseError):
    """Invalid or inconsistent experiment configuration."""


class TrainingError(ExitwiseError):
    """Training aborted (e.g. the loss became non-finite)."""
