class PrunekitError(Exception):
    """Base class for errors raised by prunekit."""


class DataError(PrunekitError, ValueError):
    """Malformed or inconsistent input data."""


class ModelError(PrunekitError, ValueError):
    """Invalid model specification or model/data mismatch."""


class ConfigError(PrunekitError, ValueError):
    """Invalid run configuration."""
