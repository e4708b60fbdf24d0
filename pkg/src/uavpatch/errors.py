class ConfigError(ValueError):
    """Invalid configuration or unusable input data."""


class MissingArtifactError(FileNotFoundError):
    """An upstream stage's output is absent."""


class NumericalError(RuntimeError):
    """Training or optimization produced a non-finite value."""
