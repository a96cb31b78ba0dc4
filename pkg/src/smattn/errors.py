"""Exception hierarchy shared across the package.

Each class carries the CLI exit code it maps to, so the command layer can
translate failures without a lookup table.
"""


class SMAttnError(Exception):
    exit_code = 2


class ConfigError(SMAttnError, ValueError):
    exit_code = 2


class DataError(SMAttnError, ValueError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyDatasetError(DataError):
    pass


class VocabularyError(DataError, IndexError):
    pass


class SamplingError(DataError):
    pass


class SimulationError(SMAttnError, RuntimeError):
    pass


class StationarityError(ConfigError):
    pass


class TemporalOrderError(SMAttnError, ValueError):
    pass


class DomainError(SMAttnError, ValueError):
    pass


class NumericError(SMAttnError, ArithmeticError):
    exit_code = 3


class DimensionError(NumericError, ValueError):
    pass


class DegenerateRowError(NumericError):
    pass


class ParameterDomainError(NumericError, ValueError):
    pass


class EvaluationError(NumericError):
    pass
