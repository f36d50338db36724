"""Exception types shared across the toolkit."""


class StructuralError(ValueError):
    """Inputs are inconsistent (shapes, grids, missing labels, bad geometry)."""


class DivergedError(RuntimeError):
    """An iterative solver failed to converge or produced non-finite values.

    ``iteration`` is the iteration at which the failure was detected and
    ``report`` (when available) carries the solver history.
    """

    def __init__(self, message, iteration=None, report=None):
        super().__init__(message)
        self.iteration = iteration
        self.report = report
