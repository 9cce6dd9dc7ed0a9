"""
Log densities on unconstrained space.

A LogDensityModel wraps a callable ``x -> (log density, gradient)`` over
R^dimension. Models written on constrained parameters (scales in (0, inf),
probabilities in (0, 1)) are lifted with ``LogDensityModel.from_constrained``,
which composes the per-coordinate transform and adds its log-Jacobian.
"""

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit, log_expit

from .exceptions import GradientCheckError, InferenceError

logger = logging.getLogger(__name__)

GRADIENT_RTOL = 1e-5
GRADIENT_POINTS = 20
FD_STEP = 1e-6


class Transform(str, Enum):
    IDENTITY = 'identity'
    LOG = 'log'
    LOGIT = 'logit'


def constrain(x, transforms):
    """Map unconstrained values onto the constrained space."""
    x = np.asarray(x, dtype=float)
    y = x.copy()
    log_mask = transforms == Transform.LOG.value
    logit_mask = transforms == Transform.LOGIT.value
    y[..., log_mask] = np.exp(x[..., log_mask])
    y[..., logit_mask] = expit(x[..., logit_mask])
    return y


def unconstrain(y, transforms):
    y = np.asarray(y, dtype=float)
    x = y.copy()
    log_mask = transforms == Transform.LOG.value
    logit_mask = transforms == Transform.LOGIT.value
    x[..., log_mask] = np.log(y[..., log_mask])
    x[..., logit_mask] = np.log(y[..., logit_mask]) - np.log1p(-y[..., logit_mask])
    return x


def _jacobian_terms(x, transforms):
    """(log |dy/dx|, dy/dx, d log|dy/dx| / dx) per coordinate."""
    log_jac = np.zeros_like(x)
    dy_dx = np.ones_like(x)
    dlog_jac = np.zeros_like(x)

    log_mask = transforms == Transform.LOG.value
    log_jac[log_mask] = x[log_mask]
    dy_dx[log_mask] = np.exp(x[log_mask])
    dlog_jac[log_mask] = 1.0

    logit_mask = transforms == Transform.LOGIT.value
    xl = x[logit_mask]
    y = expit(xl)
    log_jac[logit_mask] = log_expit(xl) + log_expit(-xl)
    dy_dx[logit_mask] = y * (1.0 - y)
    dlog_jac[logit_mask] = 1.0 - 2.0 * y
    return log_jac, dy_dx, dlog_jac


@dataclass(frozen=True)
class LogDensityModel:
    """
    Differentiable log density on unconstrained R^dimension.

    Attributes:
        dimension (int): Number of coordinates.
        value_and_gradient (callable): ``x -> (float, ndarray)`` on the
            unconstrained space. Must not mutate shared state.
        names (tuple): Coordinate names for draws and summaries.
        transforms (tuple): Per-coordinate ``Transform`` values; draws are
            reported on the constrained scale.
    """

    dimension: int
    value_and_gradient: callable
    names: tuple = None
    transforms: tuple = None

    def __post_init__(self):
        if self.dimension < 1:
            raise InferenceError(f"dimension must be positive, got {self.dimension}")
        if self.names is None:
            object.__setattr__(self, 'names', tuple(f"x[{i}]" for i in range(self.dimension)))
        if self.transforms is None:
            object.__setattr__(self, 'transforms', (Transform.IDENTITY,) * self.dimension)
        object.__setattr__(self, 'transforms', tuple(Transform(t) for t in self.transforms))
        if len(self.names) != self.dimension or len(self.transforms) != self.dimension:
            raise InferenceError("names and transforms must have one entry per coordinate")

    @property
    def transform_codes(self):
        return np.array([t.value for t in self.transforms])

    def __call__(self, x):
        """Log density and gradient; non-finite values come back as -inf."""
        x = np.asarray(x, dtype=float)
        with np.errstate(all='ignore'):
            try:
                value, grad = self.value_and_gradient(x)
            except (FloatingPointError, ZeroDivisionError, OverflowError):
                return -np.inf, np.full(self.dimension, np.nan)
        grad = np.asarray(grad, dtype=float)
        if grad.shape != (self.dimension,):
            raise InferenceError(f"gradient has shape {grad.shape}, expected ({self.dimension},)")
        value = float(value)
        if np.isnan(value):
            value = -np.inf
        return value, grad

    def constrain(self, x):
        return constrain(x, self.transform_codes)

    def unconstrain(self, y):
        return unconstrain(y, self.transform_codes)

    @classmethod
    def from_constrained(cls, log_density, transforms, names=None):
        """
        Lift a log density written on constrained parameters.

        Args:
            log_density (callable): ``y -> (value, gradient wrt y)``.
            transforms: One ``Transform`` per coordinate.
            names: Optional coordinate names.
        """
        transforms = tuple(Transform(t) for t in transforms)
        codes = np.array([t.value for t in transforms])

        def value_and_gradient(x):
            y = constrain(x, codes)
            value, grad_y = log_density(y)
            log_jac, dy_dx, dlog_jac = _jacobian_terms(x, codes)
            return value + log_jac.sum(), np.asarray(grad_y) * dy_dx + dlog_jac

        return cls(len(transforms), value_and_gradient, names, transforms)


def check_gradient(model, rng, points=GRADIENT_POINTS, rtol=GRADIENT_RTOL, step=FD_STEP, radius=2.0):
    """
    Compare the model gradient with central finite differences.

    Points are drawn uniformly from [-radius, radius]^dimension; points where
    the density is not finite are skipped. The error at each coordinate is
    |analytic - numeric| / max(1, |analytic|).

    Returns:
        float: Largest error seen.

    Raises:
        GradientCheckError: Error above ``rtol``.
    """
    worst = 0.0
    checked = 0
    for _ in range(points):
        x = rng.uniform(-radius, radius, model.dimension)
        value, grad = model(x)
        if not np.isfinite(value):
            continue
        checked += 1
        for i in range(model.dimension):
            h = step * max(1.0, abs(x[i]))
            forward, backward = x.copy(), x.copy()
            forward[i] += h
            backward[i] -= h
            numeric = (model(forward)[0] - model(backward)[0]) / (2.0 * h)
            error = abs(grad[i] - numeric) / max(1.0, abs(grad[i]))
            if not np.isfinite(error) or error > rtol:
                raise GradientCheckError(i, grad[i], numeric, x)
            worst = max(worst, error)
    logger.info(f"Gradient check passed at {checked} points (max relative error {worst:.2e})")
    return worst
