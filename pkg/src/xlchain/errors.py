"""Exception hierarchy shared by every xlchain module.

The CLI maps :class:`InputError` and subclasses to exit code 2 and
:class:`NumericError` / other runtime failures to exit code 3.
"""


class XlchainError(Exception):
    """Base class for all package errors."""


class InputError(XlchainError, ValueError):
    """Bad user input: empty corpora, invalid arguments, missing files."""


class ConfigError(InputError):
    """Invalid model, training, or generator configuration."""


class DimensionError(InputError):
    """Tensor shapes do not agree."""


class FormatError(InputError):
    """A file on disk does not match its declared format."""


class LabelError(FormatError):
    """Unknown label string in a data file."""


class IntegrityError(FormatError):
    """Duplicate or inconsistent records in a data file."""


class CompatibilityError(InputError):
    """Vocabulary and model parameters do not belong together."""


class NumericError(XlchainError, ArithmeticError):
    """NaN or infinite values where finite ones are required."""


class UsageError(XlchainError, RuntimeError):
    """API misuse, e.g. calling backward on a disconnected tensor."""
