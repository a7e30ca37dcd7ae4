"""Exception hierarchy shared by every module."""


class ScoreCompError(Exception):
    """Base class for all package errors."""


class InvalidGrid(ScoreCompError, ValueError):
    pass


class NonDivisiblePatch(ScoreCompError, ValueError):
    pass


class LengthMismatch(ScoreCompError, ValueError):
    pass


class ShapeMismatch(ScoreCompError, ValueError):
    pass


class KOutOfRange(ScoreCompError, ValueError):
    pass


class InvalidRange(ScoreCompError, ValueError):
    pass


class UnknownCondition(ScoreCompError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class MissingWeights(ScoreCompError, ValueError):
    pass


class InsufficientSamples(ScoreCompError, ValueError):
    pass


class ConfigError(ScoreCompError):
    """Invalid or unreadable experiment configuration."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
