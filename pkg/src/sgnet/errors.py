"""Exception types shared across the package.

The CLI maps these onto exit codes, so raising the right class matters:
config problems -> 2, file/data format problems -> 3, numerical blowups -> 4.
"""


class SgnetError(Exception):
    pass


class ShapeError(SgnetError, ValueError):
    """Operand shapes/ranks are incompatible with an operation's contract."""


class ContractError(SgnetError, ValueError):
    """An operation was called outside its documented preconditions."""


class ConfigError(SgnetError, ValueError):
    """A configuration object violates its invariants."""


class FormatError(SgnetError, ValueError):
    """A serialized file is malformed, truncated, or of the wrong version."""


class DegenerateInputError(SgnetError, ValueError):
    """Input data is degenerate for the requested operation (e.g. constant)."""


class NumericalError(SgnetError, FloatingPointError):
    """A non-finite value appeared while finite-checking was enabled."""
