class ThresholdError(ValueError):
    """Base class for threshold-test failures."""


class DegenerateHierarchyError(ThresholdError):
    """Too few locations left to estimate the location-level hierarchy."""


class NonFiniteLikelihoodError(ThresholdError):
    """Log posterior is not finite; carries the offending groups."""

    def __init__(self, groups):
        self.groups = list(groups)
        preview = '; '.join(self.groups[:5])
        more = '' if len(self.groups) <= 5 else f" (+{len(self.groups) - 5} more)"
        super().__init__(f"non-finite log likelihood for {preview}{more}")


class SparsityWarning(UserWarning):
    pass
