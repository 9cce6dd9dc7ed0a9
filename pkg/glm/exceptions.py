class GLMError(ValueError):
    """Base class for model specification and fitting failures."""


class RankDeficientError(GLMError):
    """Design matrix is not full rank after reference-level drops."""


class ZeroExposureError(GLMError):
    """Rows with non-positive benchmark population in an offset model."""

    def __init__(self, row_ids):
        self.row_ids = list(row_ids)
        preview = ', '.join(str(r) for r in self.row_ids[:10])
        more = '' if len(self.row_ids) <= 10 else f" (+{len(self.row_ids) - 10} more)"
        super().__init__(f"non-positive exposure in rows: {preview}{more}")


class UnknownLevelError(GLMError):
    """Profile names a factor level the fit never saw."""


class ConvergenceWarning(UserWarning):
    pass


class SeparationWarning(UserWarning):
    pass
