"""Exception hierarchy shared across the package."""


class HranError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(HranError, ValueError):
    pass


class InvalidMaskError(HranError, ValueError):
    pass


class ContractError(HranError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(HranError, ArithmeticError):
    pass


class ParameterError(HranError, ValueError):
    pass


class VocabularyError(HranError, IndexError):
    pass


class ContextError(ContractError):
    """A conversation context is unusable (e.g. fewer than two utterances)."""


class FormatError(HranError, ValueError):
    """A file on disk is malformed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CompatibilityError(HranError):
    """A checkpoint does not match the configuration it is used with."""


class EncodingError(FormatError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
