class FormatError(ValueError):
    """A persisted artifact has the wrong magic, version or shape."""


class NoSolutionError(RuntimeError):
    """Every candidate subarray is non-identifiable for the requested bound."""


class NumericError(RuntimeError):
    """Training diverged or a computation produced non-finite values."""


class ConfigError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass
