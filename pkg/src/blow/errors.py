"""Exception types shared across the package."""


class BlowError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(BlowError, ValueError):
    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class SingularMatrixError(BlowError, ArithmeticError):
    def __init__(self, message, pivot_index):
        super().__init__(message)
        self.pivot_index = pivot_index


class ConfigError(BlowError, ValueError):
    pass


class StateError(BlowError, RuntimeError):
    pass


class FormatError(BlowError, ValueError):
    def __init__(self, message, field=None, offset=None):
        super().__init__(message)
        self.field = field
        self.offset = offset


class GradCheckError(BlowError, ArithmeticError):
    pass


class SplitError(BlowError, ValueError):
    pass


class CorpusError(BlowError, ValueError):
    pass


class SpeakerLookupError(BlowError, KeyError):
    def __init__(self, name, available):
        self.name = name
        self.available = list(available)
        super().__init__(f"unknown speaker {name!r}; available: {', '.join(self.available)}")

    def __str__(self):
        return self.args[0]


class NonFiniteLossError(BlowError, FloatingPointError):
    def __init__(self, message, logdets=None):
        super().__init__(message)
        self.logdets = logdets or {}


class ConversionError(BlowError, FloatingPointError):
    """A converted utterance came out non-finite."""
