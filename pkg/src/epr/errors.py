"""Exception hierarchy.

Every error carries a short ``category`` string; the CLI prints it on stderr
and maps it to an exit code.
"""


class EprError(Exception):
    category = "error"


class InvalidParamsError(EprError, ValueError):
    category = "invalid-params"


class MomentsUndefinedError(EprError, ValueError):
    category = "moments-undefined"


class DimensionMismatchError(EprError, ValueError):
    category = "dimension-mismatch"


class BoundaryError(EprError, ValueError):
    """Shape parameters would sit on the boundary of the parameter space."""

    category = "boundary-violation"


class EmptyModelError(EprError, ValueError):
    category = "empty-model"


class NumericError(EprError, ArithmeticError):
    category = "numeric-error"


class SingularBlockError(NumericError):
    category = "singular-block"

    def __init__(self, factor: str, detail: str = ""):
        self.factor = factor
        msg = f"factor {factor!r} is singular or not positive definite"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class NotPositiveDefiniteError(NumericError):
    category = "not-positive-definite"


class CapExceededError(EprError, ValueError):
    category = "cap-exceeded"


class ExhaustedError(EprError, RuntimeError):
    """Rejection sampling gave up before collecting the requested draws."""

    category = "exhausted"

    def __init__(self, message: str, tries: int = 0, accepted: int = 0):
        super().__init__(message)
        self.tries = tries
        self.accepted = accepted


class InsufficientDrawsError(EprError, ValueError):
    category = "insufficient-draws"


class ConfigError(EprError, ValueError):
    category = "config-error"
