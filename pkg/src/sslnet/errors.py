"""Exception hierarchy; the CLI maps each family to an exit code."""


class SSLNetError(Exception):
    exit_code = 3


class ConfigError(SSLNetError, ValueError):
    exit_code = 1


class UsageError(SSLNetError, ValueError):
    exit_code = 1


class ParameterError(ConfigError):
    pass


class DataError(SSLNetError, ValueError):
    exit_code = 2


class IngestionError(DataError):
    pass


class LabelError(DataError):
    pass


class EmbeddingLookupError(DataError):
    pass


class DimensionError(SSLNetError, ValueError):
    exit_code = 3
