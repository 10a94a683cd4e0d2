"""Exception hierarchy. The CLI maps these onto exit codes."""


class PfcError(Exception):
    """Base class for all package errors."""


class InputError(PfcError, ValueError):
    """Invalid user input: shapes, ranges, labels, file contents."""


class ConfigError(PfcError, ValueError):
    """Invalid or unknown configuration value."""


class NumericError(PfcError, ArithmeticError):
    """Non-finite activations, losses or gradients."""


class DegenerateInputError(InputError):
    """Input that makes an algorithm ill-defined (e.g. all points identical)."""


class CheckpointError(PfcError, IOError):
    """Base class for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class FormatError(InputError):
    """Malformed binary data file (IDX, matrix)."""


class MagicMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class DimensionMismatchError(FormatError):
    pass
