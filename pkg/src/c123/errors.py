"""Exception types shared across the package.

Invalid arguments raise the builtin :class:`ValueError`; the classes below
cover the failure kinds that callers are expected to tell apart.
"""


class BackendError(RuntimeError):
    """A guidance or embedding backend failed; the original error is chained."""


class NumericError(ArithmeticError):
    """A non-finite or undefined quantity was produced.

    ``flag`` carries a short machine-readable tag such as
    ``"similarity-degenerate"``.
    """

    def __init__(self, message, flag=None):
        super().__init__(message)
        self.flag = flag


class NotReadyError(LookupError):
    """Not enough history has been collected to evaluate a quantity."""
