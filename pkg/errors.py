"""Error categories raised across geocomplete.

Every category knows the exit code the executable uses for it, so the
command-line layer only has to catch ``GeoCompleteError``.
"""

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class GeoCompleteError(Exception):
    category = "error"
    exit_code = EXIT_CONFIG


class ShapeError(GeoCompleteError, ValueError):
    category = "shape"


class DataError(GeoCompleteError, ValueError):
    category = "data"


class ParameterError(GeoCompleteError, ValueError):
    category = "parameter"


class ConfigurationError(GeoCompleteError):
    category = "config"


class ValidationError(GeoCompleteError, ValueError):
    category = "validation"


class ViewIndexError(GeoCompleteError, IndexError):
    category = "index"


class IngestionError(GeoCompleteError):
    category = "io"
    exit_code = EXIT_IO

    def __init__(self, path, reason):
        self.path = str(path)
        super().__init__("{}: {}".format(self.path, reason))


class NumericError(GeoCompleteError, ArithmeticError):
    category = "numeric"
    exit_code = EXIT_NUMERIC
