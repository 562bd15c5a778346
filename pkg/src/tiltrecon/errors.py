class ShapeError(ValueError):
    """Array dimensions do not match what an operation requires."""


class DegenerateUpError(ValueError):
    """Look-at construction is undefined when the view direction is parallel to world up."""


class NumericalError(RuntimeError):
    """A loss or state became non-finite during optimization.

    ``state`` holds the last finite snapshot, when one exists.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class ConfigError(ValueError):
    pass
