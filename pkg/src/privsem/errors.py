"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes of paired tensors disagree."""


class ConfigurationError(ValueError):
    """A configuration value is invalid or infeasible."""


class EmptyRegionError(ValueError):
    """An operation needing a nonempty mask received an empty one."""


class StaleDatabaseError(RuntimeError):
    """Stored database features were built by a different encoder."""


class VersionError(RuntimeError):
    """Persisted artifact carries an unsupported schema version."""


class IngestionError(RuntimeError):
    """An external corpus could not be ingested."""


class MissingDependencyError(RuntimeError):
    """A pipeline stage was invoked before its prerequisites exist."""
