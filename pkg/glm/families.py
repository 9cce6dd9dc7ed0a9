"""
Exponential-family pieces used by IRLS.

Each family turns a linear predictor into fitted means, IRLS working weights
and per-row score contributions ``w (y - mu) (dmu/deta) / V(mu)``, and
evaluates the weighted log-likelihood.
"""

import numpy as np
from scipy.special import digamma, expit, gammaln, polygamma, xlog1py, xlogy

from .exceptions import GLMError

ETA_LIMIT = 700.0


class Family:
    name = None

    def check_response(self, y):
        raise NotImplementedError

    def start_eta(self, y):
        raise NotImplementedError

    def working(self, eta, y, w):
        """Return (mu, working weights, score contributions)."""
        raise NotImplementedError

    def loglik(self, y, mu, w):
        raise NotImplementedError

    def variance(self, mu):
        raise NotImplementedError

    def pearson_chi2(self, y, mu, w):
        return float(np.sum(w * (y - mu) ** 2 / self.variance(mu)))


class Binomial(Family):
    """Logit link; ``y`` is a proportion of ``w`` replicated Bernoulli trials."""

    name = 'binomial'

    def check_response(self, y):
        if np.any((y < 0) | (y > 1)):
            raise GLMError("binomial response must lie in [0, 1]")

    def start_eta(self, y):
        p = (y + 0.5) / 2.0
        return np.log(p / (1 - p))

    def mean(self, eta):
        return expit(eta)

    def variance(self, mu):
        return mu * (1.0 - mu)

    def working(self, eta, y, w):
        mu = self.mean(eta)
        return mu, w * self.variance(mu), w * (y - mu)

    def loglik(self, y, mu, w):
        return float(np.sum(w * (xlogy(y, mu) + xlog1py(1.0 - y, -mu))))


class Poisson(Family):
    """Log link."""

    name = 'poisson'

    def check_response(self, y):
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise GLMError("count response must be non-negative integers")

    def start_eta(self, y):
        return np.log(y + 0.1)

    def mean(self, eta):
        return np.exp(np.minimum(eta, ETA_LIMIT))

    def variance(self, mu):
        return mu

    def working(self, eta, y, w):
        mu = self.mean(eta)
        return mu, w * mu, w * (y - mu)

    def loglik(self, y, mu, w):
        return float(np.sum(w * (xlogy(y, mu) - mu - gammaln(y + 1.0))))


class NegativeBinomial(Poisson):
    """Log link with ``Var = mu + mu^2 / phi`` for a fixed ``phi``."""

    name = 'negbin'

    def __init__(self, phi):
        if not phi > 0:
            raise GLMError(f"negative binomial phi must be positive, got {phi}")
        self.phi = float(phi)

    def variance(self, mu):
        return mu + mu ** 2 / self.phi

    def working(self, eta, y, w):
        mu = self.mean(eta)
        shrink = 1.0 / (1.0 + mu / self.phi)
        return mu, w * mu * shrink, w * (y - mu) * shrink

    def loglik(self, y, mu, w):
        return float(np.sum(w * nb_loglik_terms(y, mu, self.phi)))


def nb_loglik_terms(y, mu, phi):
    """Per-row negative binomial log-likelihood."""
    return (
        gammaln(y + phi) - gammaln(phi) - gammaln(y + 1.0)
        - phi * np.log1p(mu / phi) + xlogy(y, mu) - xlogy(y, phi + mu)
    )


def nb_phi_derivatives(y, mu, phi, w):
    """First and second derivatives of the log-likelihood in phi."""
    ratio = (phi + y) / (phi + mu)
    grad = np.sum(w * (digamma(y + phi) - digamma(phi) - np.log1p(mu / phi) + 1.0 - ratio))
    hess = np.sum(w * (
        polygamma(1, y + phi) - polygamma(1, phi) + 1.0 / phi - 2.0 / (phi + mu) + ratio / (phi + mu)
    ))
    return float(grad), float(hess)
