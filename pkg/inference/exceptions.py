class InferenceError(RuntimeError):
    """Base class for sampler and diagnostic failures."""


class InitializationError(InferenceError):
    """No finite starting point found for a chain."""


class GradientCheckError(InferenceError):
    """Model gradient disagrees with central finite differences."""

    def __init__(self, coordinate, analytic, numeric, point=None):
        self.coordinate = coordinate
        self.analytic = analytic
        self.numeric = numeric
        self.point = point
        super().__init__(
            f"gradient check failed at coordinate {coordinate}: "
            f"analytic {analytic:.6g} vs finite difference {numeric:.6g}"
        )


class DiagnosticsError(InferenceError, ValueError):
    """Too few chains or draws for a diagnostic."""


class DivergenceWarning(UserWarning):
    pass
