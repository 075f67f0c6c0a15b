"""Exception hierarchy. Each class carries the CLI exit code for its category."""


class BikeflowError(Exception):
    exit_code = 1


class ConfigError(BikeflowError):
    exit_code = 2


class SchemaError(BikeflowError):
    exit_code = 3


class DataError(BikeflowError):
    exit_code = 4


class DivergenceError(BikeflowError):
    """Raised when a loss or gradient goes non-finite.

    ``last_good`` holds the most recent finite parameter snapshot, if any.
    """

    exit_code = 5

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
