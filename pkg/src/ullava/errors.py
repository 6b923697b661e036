"""Exception types raised across the package.

``ValidationError`` subclasses signal bad inputs (CLI exit code 1); everything
else deriving from ``UllavaError`` is a runtime failure (exit code 2).
"""


class UllavaError(Exception):
    pass


class ValidationError(UllavaError, ValueError):
    pass


class UnknownPlaceholder(ValidationError):
    pass


class SequenceTooLong(ValidationError):
    pass


# render-time name used by the token layout code
TooLong = SequenceTooLong


class BadShape(ValidationError):
    pass


class DimMismatch(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class EmptyLossMask(ValidationError):
    pass


class EmptyMask(ValidationError):
    pass


class MalformedRle(ValidationError):
    pass


class BadCorpus(ValidationError):
    pass


class NoEvidence(ValidationError):
    pass


class IndexOutOfRange(UllavaError, IndexError):
    pass


class ParseError(ValidationError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class VersionMismatch(UllavaError):
    pass


class CorruptCheckpoint(UllavaError):
    pass


class ClientError(UllavaError):
    pass
