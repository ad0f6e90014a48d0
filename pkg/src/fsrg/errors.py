"""Exception hierarchy shared across the package."""


class FSRGError(Exception):
    """Base class for all errors raised by fsrg."""


class TemplateError(FSRGError, ValueError):
    """Template file is malformed or fails validation."""


class ConfigError(FSRGError, ValueError):
    """Invalid configuration value or inconsistent settings."""


class DatasetError(FSRGError, ValueError):
    """Label file, image directory or episode request cannot be satisfied."""


class CheckpointError(FSRGError):
    """Checkpoint container is corrupt, truncated or of an unknown version."""


class UndefinedMetricError(FSRGError, ValueError):
    """A metric is undefined for the given input (e.g. AUC with one class)."""


class DivergenceError(FSRGError, RuntimeError):
    """Training produced a non-finite loss."""
