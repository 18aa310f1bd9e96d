"""Exception types shared across the package."""


class MMTransError(Exception):
    """Base class for all package errors."""


class ValidationError(MMTransError):
    """Inputs violate a documented invariant (shape, range, partition...)."""


class LoadError(MMTransError):
    """A file is missing or cannot be parsed."""


class ConfigurationError(MMTransError):
    """A run is missing a prerequisite (checkpoint, config field...)."""


class TrainingDiverged(MMTransError):
    """A training loop produced a non-finite loss."""
