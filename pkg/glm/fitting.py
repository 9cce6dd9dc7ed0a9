"""
IRLS fitting for logistic, Poisson, quasi-Poisson and negative binomial
regressions, sandwich covariance, and profile predictions.
"""

import json
import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from numerics.exceptions import NotPositiveDefiniteError
from numerics.linalg import solve_spd, spd_inverse, weighted_crossprod

from .design import DesignSpec
from .exceptions import ConvergenceWarning, GLMError, RankDeficientError, SeparationWarning
from .families import Binomial, NegativeBinomial, Poisson, nb_loglik_terms, nb_phi_derivatives

logger = logging.getLogger(__name__)

MAX_ITER = 100
MAX_HALVINGS = 30
GRADIENT_TOL = 1e-8
SCORE_TOL = 1e-6
LOGLIK_TOL = 1e-10
SEPARATION_COEF = 20.0
PHI_LIMIT = 1e8

COUNT_FAMILIES = ('poisson', 'quasipoisson', 'negbin')


@dataclass(frozen=True)
class FitResult:
    """Immutable output of a GLM fit.

    ``flags`` holds conditions a reader must see next to the numbers:
    ``separation``, ``equidispersed``, ``not_converged``.
    """

    family: str
    names: tuple
    coefficients: np.ndarray
    covariance: np.ndarray
    dispersion: float
    converged: bool
    iterations: int
    loglik: float
    n_rows: int
    n_obs: float
    spec: DesignSpec
    covariance_type: str = 'model'
    dispersion_se: float = None
    flags: tuple = ()
    metadata: dict = field(default_factory=dict)

    @property
    def std_errors(self):
        return np.sqrt(np.diag(self.covariance))

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise GLMError(f"no coefficient named {name!r}") from None

    def coef(self, name):
        return float(self.coefficients[self.index(name)])

    def std_error(self, name):
        i = self.index(name)
        return float(np.sqrt(self.covariance[i, i]))

    def table(self):
        """Coefficient rows as dicts (name, estimate, std_error)."""
        return [
            {'name': n, 'estimate': float(c), 'std_error': float(s)}
            for n, c, s in zip(self.names, self.coefficients, self.std_errors)
        ]

    def to_dict(self):
        return {
            'family': self.family,
            'coefficients': self.table(),
            'covariance': self.covariance.tolist(),
            'covariance_type': self.covariance_type,
            'dispersion': self.dispersion,
            'dispersion_se': self.dispersion_se,
            'convergence': {
                'converged': self.converged,
                'iterations': self.iterations,
                'loglik': self.loglik,
                'flags': list(self.flags),
            },
            'n_rows': self.n_rows,
            'n_obs': self.n_obs,
            'spec': self.spec.to_dict(),
            'metadata': self.metadata,
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, payload):
        convergence = payload['convergence']
        return cls(
            family=payload['family'],
            names=tuple(row['name'] for row in payload['coefficients']),
            coefficients=np.array([row['estimate'] for row in payload['coefficients']]),
            covariance=np.array(payload['covariance'], dtype=float),
            dispersion=payload['dispersion'],
            converged=convergence['converged'],
            iterations=convergence['iterations'],
            loglik=convergence['loglik'],
            n_rows=payload['n_rows'],
            n_obs=payload['n_obs'],
            spec=DesignSpec.from_dict(payload['spec']),
            covariance_type=payload['covariance_type'],
            dispersion_se=payload.get('dispersion_se'),
            flags=tuple(convergence['flags']),
            metadata=payload.get('metadata', {}),
        )


@dataclass
class _IrlsState:
    beta: np.ndarray
    eta: np.ndarray
    mu: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    information: np.ndarray
    score: np.ndarray


def _solve(matrix, rhs):
    try:
        return solve_spd(matrix, rhs)
    except NotPositiveDefiniteError as exc:
        raise RankDeficientError(f"design is not full rank: {exc}") from exc


def _irls(design, family, start=None, max_iter=MAX_ITER):
    X, y, w, off = design.X, design.response, design.weights, design.offset
    gradient_tol = min(GRADIENT_TOL * max(1.0, np.sqrt(design.total_weight)), SCORE_TOL)

    if start is None:
        eta = family.start_eta(y)
        beta = None
        loglik = -np.inf
    else:
        beta = np.asarray(start, dtype=float)
        eta = X @ beta + off
        loglik = family.loglik(y, family.working(eta, y, w)[0], w)

    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        mu, W, u = family.working(eta, y, w)
        information = weighted_crossprod(X, W)
        candidate = _solve(information, X.T @ (W * (eta - off) + u))

        new_eta = X @ candidate + off
        new_loglik = family.loglik(y, family.working(new_eta, y, w)[0], w)
        halvings = 0
        while beta is not None and not new_loglik >= loglik - 1e-12 * abs(loglik):
            if halvings == MAX_HALVINGS:
                logger.warning(f"{family.name}: step-halving exhausted at iteration {iterations}")
                break
            candidate = 0.5 * (beta + candidate)
            new_eta = X @ candidate + off
            new_loglik = family.loglik(y, family.working(new_eta, y, w)[0], w)
            halvings += 1

        change = abs(new_loglik - loglik) / (abs(new_loglik) + 0.1) if np.isfinite(loglik) else np.inf
        beta, eta, loglik = candidate, new_eta, new_loglik
        score = X.T @ family.working(eta, y, w)[2]
        if np.max(np.abs(score)) <= gradient_tol and change <= LOGLIK_TOL:
            converged = True
            break

    mu, W, u = family.working(eta, y, w)
    return _IrlsState(
        beta=beta, eta=eta, mu=mu, loglik=loglik, iterations=iterations, converged=converged,
        information=weighted_crossprod(X, W), score=X.T @ u,
    )


def _covariance(information):
    try:
        return spd_inverse(information)
    except NotPositiveDefiniteError as exc:
        raise RankDeficientError(f"information matrix is singular: {exc}") from exc


def _result(design, family_name, state, dispersion=1.0, covariance=None, flags=(), **extra):
    flags = list(flags)
    if not state.converged:
        flags.append('not_converged')
        warnings.warn(f"{family_name} fit did not converge in {state.iterations} iterations", ConvergenceWarning)
        logger.warning(f"{family_name} fit did not converge in {state.iterations} iterations")
    return FitResult(
        family=family_name,
        names=tuple(design.column_names),
        coefficients=state.beta,
        covariance=_covariance(state.information) if covariance is None else covariance,
        dispersion=float(dispersion),
        converged=state.converged and 'separation' not in flags,
        iterations=state.iterations,
        loglik=float(state.loglik),
        n_rows=design.rows,
        n_obs=design.total_weight,
        spec=design.spec,
        flags=tuple(dict.fromkeys(flags)),
        metadata=dict(design.metadata),
        **extra,
    )


def fit_logistic(design, max_iter=MAX_ITER):
    """
    Logistic regression by IRLS.

    Args:
        design (Design): Binary or proportion response; replication weights
            count the trials behind each row.

    Returns:
        FitResult: Log-odds coefficients relative to the reference levels.
        Divergent coefficients (|b| > 20) or fitted probabilities pinned at
        0/1 mark the fit as separated and not converged.

    Raises:
        RankDeficientError: If the design is collinear.
    """
    family = Binomial()
    family.check_response(design.response)
    state = _irls(design, family, max_iter=max_iter)

    flags = []
    pinned = (state.mu < 1e-10) | (state.mu > 1 - 1e-10)
    divergent = [n for n, b in zip(design.column_names, state.beta) if abs(b) > SEPARATION_COEF]
    if divergent or np.any(pinned):
        flags.append('separation')
        message = f"quasi-complete separation: divergent coefficients {divergent}"
        warnings.warn(message, SeparationWarning)
        logger.warning(message)

    result = _result(design, 'binomial', state, flags=flags)
    logger.info(
        f"Logistic fit: {design.rows} rows ({design.total_weight:.0f} obs), "
        f"{len(result.names)} coefficients, converged={result.converged} in {result.iterations} iterations"
    )
    return result


def _initial_phi(y, mu, w):
    excess = np.sum(w * ((y - mu) ** 2 - y))
    if excess <= 0:
        return PHI_LIMIT
    return float(np.sum(w * mu ** 2) / excess)


def _fit_phi(y, mu, w, phi, max_iter=50):
    """Newton on log(phi) with mu held fixed."""
    log_phi = np.log(phi)
    loglik = float(np.sum(w * nb_loglik_terms(y, mu, phi)))
    for _ in range(max_iter):
        grad, hess = nb_phi_derivatives(y, mu, np.exp(log_phi), w)
        phi_now = np.exp(log_phi)
        grad_log = phi_now * grad
        hess_log = phi_now ** 2 * hess + phi_now * grad
        step = -grad_log / hess_log if hess_log < 0 else np.sign(grad_log)
        step = float(np.clip(step, -5.0, 5.0))
        for _ in range(MAX_HALVINGS):
            candidate = log_phi + step
            new_loglik = float(np.sum(w * nb_loglik_terms(y, mu, np.exp(candidate))))
            if new_loglik >= loglik - 1e-12 * abs(loglik):
                break
            step *= 0.5
        else:
            break
        converged = abs(candidate - log_phi) < 1e-10
        log_phi, loglik = candidate, new_loglik
        if converged or log_phi > np.log(PHI_LIMIT):
            break
    return float(np.exp(log_phi))


def fit_count(design, family='negbin', max_iter=MAX_ITER):
    """
    Count regression with a log link.

    Args:
        design (Design): Non-negative integer response; the offset carries
            the log benchmark population when benchmarking.
        family (str): ``poisson``, ``quasipoisson`` or ``negbin``
            (``Var = mu + mu^2 / phi``).

    Returns:
        FitResult: ``dispersion`` is phi for negbin, the Pearson scale for
        quasipoisson and 1 for poisson. A negbin fit whose phi reaches 1e8
        comes back as the Poisson fit flagged ``equidispersed``.
    """
    if family not in COUNT_FAMILIES:
        raise GLMError(f"unknown count family {family!r}; expected one of {COUNT_FAMILIES}")
    poisson = Poisson()
    poisson.check_response(design.response)
    y, w = design.response, design.weights

    state = _irls(design, poisson, max_iter=max_iter)
    if family == 'poisson':
        return _log_count(_result(design, 'poisson', state))

    if family == 'quasipoisson':
        df = design.total_weight - design.X.shape[1]
        if df <= 0:
            raise GLMError("quasi-Poisson needs more observations than coefficients")
        scale = poisson.pearson_chi2(y, state.mu, w) / df
        covariance = _covariance(state.information) * scale
        return _log_count(_result(design, 'quasipoisson', state, dispersion=scale,
                                  covariance=covariance, covariance_type='quasi'))

    phi = _initial_phi(y, state.mu, w)
    loglik = -np.inf
    converged = False
    nb_state = state
    for outer in range(1, max_iter + 1):
        phi = _fit_phi(y, nb_state.mu, w, min(phi, PHI_LIMIT))
        if phi >= PHI_LIMIT:
            break
        nb_state = _irls(design, NegativeBinomial(phi), start=nb_state.beta, max_iter=max_iter)
        change = abs(nb_state.loglik - loglik) / (abs(nb_state.loglik) + 0.1)
        loglik = nb_state.loglik
        if change <= LOGLIK_TOL and nb_state.converged:
            converged = True
            break

    if phi >= PHI_LIMIT:
        logger.warning("Negative binomial phi diverged: data look equidispersed, returning the Poisson fit")
        return _log_count(_result(design, 'poisson', state, flags=['equidispersed']))

    nb_state.converged = converged
    _, hess = nb_phi_derivatives(y, nb_state.mu, phi, w)
    phi_se = float(np.sqrt(-1.0 / hess)) if hess < 0 else float('nan')
    return _log_count(_result(design, 'negbin', nb_state, dispersion=phi, dispersion_se=phi_se))


def _log_count(result):
    logger.info(
        f"{result.family} fit: {result.n_rows} cells, dispersion={result.dispersion:.4g}, "
        f"converged={result.converged} in {result.iterations} iterations"
    )
    return result


def sandwich_errors(fit, design):
    """
    Replace a Poisson fit's covariance with H^-1 (sum_i g_i g_i') H^-1.

    Coefficients are unchanged. Replicated rows count as independent
    observations, so each contributes ``w (y - mu)^2 x x'`` to the meat.

    Raises:
        GLMError: If the fit is not a Poisson-type fit of this design.
        RankDeficientError: If H is singular.
    """
    if fit.family not in ('poisson', 'quasipoisson'):
        raise GLMError(f"sandwich errors need a Poisson fit, got {fit.family}")
    if tuple(design.column_names) != fit.names:
        raise GLMError("design columns do not match the fit")
    mu = Poisson().mean(design.X @ fit.coefficients + design.offset)
    bread = _covariance(weighted_crossprod(design.X, design.weights * mu))
    meat = weighted_crossprod(design.X, design.weights * (design.response - mu) ** 2)
    covariance = bread @ meat @ bread
    covariance = 0.5 * (covariance + covariance.T)
    return replace(fit, covariance=covariance, covariance_type='sandwich', dispersion=1.0)


def linear_predictor(fit, profile):
    return float(fit.spec.profile_row(profile) @ fit.coefficients)


def predict_rate(fit, profile):
    """
    Inverse-link rate at a profile of factor levels.

    Args:
        fit (FitResult): Fitted model.
        profile (dict): Level (or ``{level: weight}`` for a weighted
            average of design rows) for every factor, value for every
            numeric covariate. Offsets are not applied, so count models
            return a rate per unit of exposure.

    Returns:
        float: Probability for binomial fits, rate for count fits.
    """
    eta = linear_predictor(fit, profile)
    if fit.family == 'binomial':
        return float(Binomial().mean(eta))
    return float(np.exp(eta))
