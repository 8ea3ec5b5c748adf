"""Exception types shared across the package."""


class UsageError(ValueError):
    """Invalid arguments: wrong shapes, out-of-range parameters, bad config."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values (blow-up, overflow).

    Parameters
    ----------
    message : str
        Human-readable description.
    step : int, optional
        Time-step index at which the failure was detected.
    path : int, optional
        Sample-path index, when known.
    value : object, optional
        The offending input.
    """

    def __init__(self, message, step=None, path=None, value=None):
        super().__init__(message)
        self.step = step
        self.path = path
        self.value = value
