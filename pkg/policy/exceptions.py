class PolicyError(ValueError):
    """Base class for legalization-analysis failures."""


class EmptyCellError(PolicyError):
    """A treated/control x pre/post cell the estimator needs has no stops."""

    def __init__(self, cells):
        self.cells = list(cells)
        super().__init__(f"no stops in {', '.join(self.cells)}")
