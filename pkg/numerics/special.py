"""
Regularized incomplete beta function and beta tail moments.

Values of I_x(a, b) come from scipy's betainc/betaincc. The log tails and their
shape derivatives come from the modified Lentz continued fraction on whichever
tail converges fast (the switch sits at x = (a + 1) / (a + b + 2)), with the
other tail obtained by complement in log space; wherever the library values are
representable they replace the continued-fraction log values. Parameter
derivatives are carried through the recursion in forward mode, so the threshold
likelihood gets exact gradients with respect to a and b.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc, betaincc, betaln, digamma

from .exceptions import ConvergenceFailure, DomainError

logger = logging.getLogger(__name__)

FPMIN = 1e-300
CF_EPS = 1e-15
CF_MAX_ITER = 10000
LIBRARY_FLOOR = 1e-290


@dataclass(frozen=True)
class BetaShape:
    """Beta distribution in mean / total-count form."""

    phi: float
    lam: float

    def __post_init__(self):
        if not 0.0 < self.phi < 1.0:
            raise DomainError(f"phi must lie in (0, 1), got {self.phi}")
        if not self.lam > 0.0:
            raise DomainError(f"lambda must be positive, got {self.lam}")

    @property
    def alpha(self):
        return self.phi * self.lam

    @property
    def beta(self):
        return (1.0 - self.phi) * self.lam


@dataclass(frozen=True)
class TailMoments:
    search_rate: float
    hit_rate: float
    degenerate: bool = False


@dataclass
class IncBetaGrad:
    """Log tails of I_x(a, b) and their partial derivatives.

    ``log_lower`` is log I_x(a, b) and ``log_upper`` is log(1 - I_x(a, b)).
    Derivatives are of the log tails with respect to x, a and b.
    """

    log_lower: np.ndarray
    log_upper: np.ndarray
    dlower_dx: np.ndarray
    dlower_da: np.ndarray
    dlower_db: np.ndarray
    dupper_dx: np.ndarray
    dupper_da: np.ndarray
    dupper_db: np.ndarray


def _guard(values):
    return np.where(np.abs(values) < FPMIN, FPMIN, values)


def _lentz_step(aa, aa_a, aa_b, state, grad):
    c, d, h, dc_a, dc_b, dd_a, dd_b, dh_a, dh_b = state
    u = _guard(1.0 + aa * d)
    d_new = 1.0 / u
    v = _guard(1.0 + aa / c)
    factor = d_new * v
    if grad:
        du_a = aa_a * d + aa * dd_a
        du_b = aa_b * d + aa * dd_b
        dd_a = -du_a * d_new ** 2
        dd_b = -du_b * d_new ** 2
        dc_a = aa_a / c - aa * dc_a / c ** 2
        dc_b = aa_b / c - aa * dc_b / c ** 2
        df_a = dd_a * v + d_new * dc_a
        df_b = dd_b * v + d_new * dc_b
        dh_a, dh_b = dh_a * factor + h * df_a, dh_b * factor + h * df_b
    return (v, d_new, h * factor, dc_a, dc_b, dd_a, dd_b, dh_a, dh_b), factor


def _continued_fraction(x, a, b, grad=False):
    """Evaluate the incomplete-beta continued fraction elementwise.

    Returns the fraction value h with I_x(a, b) = x^a (1-x)^b h / (a B(a, b)),
    and, when ``grad`` is set, d log h / da and d log h / db.
    """
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    zeros = np.zeros_like(x)

    u = _guard(1.0 - qab * x / qap)
    d = 1.0 / u
    if grad:
        du_a = -x * (1.0 - b) / qap ** 2
        du_b = -x / qap
        dd_a = -du_a * d ** 2
        dd_b = -du_b * d ** 2
    else:
        dd_a = dd_b = zeros
    state = (np.ones_like(x), d, d.copy(), zeros, zeros, dd_a, dd_b, dd_a.copy(), dd_b.copy())

    for m in range(1, CF_MAX_ITER + 1):
        m2 = 2.0 * m
        den = (qam + m2) * (a + m2)
        aa = m * (b - m) * x / den
        aa_a = aa * (-1.0 / (qam + m2) - 1.0 / (a + m2)) if grad else zeros
        aa_b = m * x / den if grad else zeros
        state, _ = _lentz_step(aa, aa_a, aa_b, state, grad)

        den = (a + m2) * (qap + m2)
        aa = -(a + m) * (qab + m) * x / den
        if grad:
            aa_a = aa * (1.0 / (a + m) + 1.0 / (qab + m) - 1.0 / (a + m2) - 1.0 / (qap + m2))
            aa_b = aa / (qab + m)
        state, factor = _lentz_step(aa, aa_a, aa_b, state, grad)

        if np.all(np.abs(factor - 1.0) < CF_EPS):
            break
    else:
        raise ConvergenceFailure(
            f"incomplete beta continued fraction did not converge in {CF_MAX_ITER} iterations"
        )

    h = state[2]
    if not grad:
        return h, None, None
    return h, state[7] / h, state[8] / h


def _log1mexp(log_values):
    """log(1 - exp(v)) for v <= 0, accurate on both sides of -log 2."""
    log_values = np.minimum(log_values, 0.0)
    out = np.empty_like(log_values)
    near = log_values > -np.log(2.0)
    with np.errstate(divide='ignore'):
        out[near] = np.log(-np.expm1(log_values[near]))
        out[~near] = np.log1p(-np.exp(log_values[~near]))
    return out


def _log_tail_direct(x, a, b, grad):
    """log I_x(a, b) by continued fraction, with log-derivatives in a and b."""
    h, dlogh_a, dlogh_b = _continued_fraction(x, a, b, grad)
    log_front = a * np.log(x) + b * np.log1p(-x) - betaln(a, b) - np.log(a)
    log_tail = log_front + np.log(h)
    if not grad:
        return log_tail, None, None
    psi_ab = digamma(a + b)
    dfront_a = np.log(x) - digamma(a) + psi_ab - 1.0 / a
    dfront_b = np.log1p(-x) - digamma(b) + psi_ab
    return log_tail, dfront_a + dlogh_a, dfront_b + dlogh_b


def _prepare(x, a, b):
    x, a, b = np.broadcast_arrays(
        np.asarray(x, dtype=float), np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    )
    if np.any(~np.isfinite(x)) or np.any((x < 0.0) | (x > 1.0)):
        raise DomainError("x must lie in [0, 1]")
    if np.any(~(a > 0.0)) or np.any(~(b > 0.0)):
        raise DomainError("shape parameters a and b must be positive and finite")
    if np.any(~np.isfinite(a)) or np.any(~np.isfinite(b)):
        raise DomainError("shape parameters a and b must be finite")
    return x.ravel(), a.ravel(), b.ravel(), x.shape


def _library_log_tails(x, a, b, log_lower, log_upper):
    """Overwrite log tails in place from betainc/betaincc where the smaller tail is representable."""
    lower = betainc(a, b, x)
    upper = betaincc(a, b, x)
    lower_small = lower <= upper
    small = np.where(lower_small, lower, upper)
    ok = small > LIBRARY_FLOOR
    log_small = np.log(small[ok])
    log_big = np.log1p(-small[ok])
    log_lower[ok] = np.where(lower_small[ok], log_small, log_big)
    log_upper[ok] = np.where(lower_small[ok], log_big, log_small)


def _log_tails(x, a, b, grad=False):
    x, a, b, shape = _prepare(x, a, b)
    n = x.size
    log_lower = np.empty(n)
    log_upper = np.empty(n)
    grads = {key: np.zeros(n) for key in ('lower_a', 'lower_b', 'upper_a', 'upper_b')}

    at_zero = x == 0.0
    at_one = x == 1.0
    log_lower[at_zero], log_upper[at_zero] = -np.inf, 0.0
    log_lower[at_one], log_upper[at_one] = 0.0, -np.inf

    interior = ~(at_zero | at_one)
    lower_first = interior & (x < (a + 1.0) / (a + b + 2.0))
    upper_first = interior & ~lower_first

    if np.any(lower_first):
        idx = lower_first
        lt, dl_a, dl_b = _log_tail_direct(x[idx], a[idx], b[idx], grad)
        log_lower[idx] = lt
        log_upper[idx] = _log1mexp(lt)
        if grad:
            ratio = np.exp(lt - log_upper[idx])
            grads['lower_a'][idx], grads['lower_b'][idx] = dl_a, dl_b
            grads['upper_a'][idx], grads['upper_b'][idx] = -ratio * dl_a, -ratio * dl_b

    if np.any(upper_first):
        idx = upper_first
        # 1 - I_x(a, b) = I_{1-x}(b, a): roles of a and b swap in the derivatives
        ut, du_b, du_a = _log_tail_direct(1.0 - x[idx], b[idx], a[idx], grad)
        log_upper[idx] = ut
        log_lower[idx] = _log1mexp(ut)
        if grad:
            ratio = np.exp(ut - log_lower[idx])
            grads['upper_a'][idx], grads['upper_b'][idx] = du_a, du_b
            grads['lower_a'][idx], grads['lower_b'][idx] = -ratio * du_a, -ratio * du_b

    if np.any(interior):
        refined_lower, refined_upper = log_lower[interior], log_upper[interior]
        _library_log_tails(x[interior], a[interior], b[interior], refined_lower, refined_upper)
        log_lower[interior], log_upper[interior] = refined_lower, refined_upper

    if not grad:
        return log_lower.reshape(shape), log_upper.reshape(shape), None

    dx_lower = np.zeros(n)
    dx_upper = np.zeros(n)
    if np.any(interior):
        xi, ai, bi = x[interior], a[interior], b[interior]
        log_pdf = (ai - 1.0) * np.log(xi) + (bi - 1.0) * np.log1p(-xi) - betaln(ai, bi)
        dx_lower[interior] = np.exp(log_pdf - log_lower[interior])
        dx_upper[interior] = -np.exp(log_pdf - log_upper[interior])

    result = IncBetaGrad(
        log_lower=log_lower.reshape(shape),
        log_upper=log_upper.reshape(shape),
        dlower_dx=dx_lower.reshape(shape),
        dlower_da=grads['lower_a'].reshape(shape),
        dlower_db=grads['lower_b'].reshape(shape),
        dupper_dx=dx_upper.reshape(shape),
        dupper_da=grads['upper_a'].reshape(shape),
        dupper_db=grads['upper_b'].reshape(shape),
    )
    return result.log_lower, result.log_upper, result


def _scalar_or_array(values, *inputs):
    if all(np.ndim(v) == 0 for v in inputs):
        return float(values)
    return values


def reg_inc_beta(x, a, b):
    """Regularized incomplete beta function I_x(a, b).

    Args:
        x: Evaluation point(s) in [0, 1].
        a: First shape parameter(s), positive.
        b: Second shape parameter(s), positive.

    Returns:
        float or ndarray: I_x(a, b), broadcast over the inputs.

    Raises:
        DomainError: If any argument is outside its domain.
    """
    x_flat, a_flat, b_flat, shape = _prepare(x, a, b)
    values = betainc(a_flat, b_flat, x_flat).reshape(shape)
    return _scalar_or_array(values, x, a, b)


def log_reg_inc_beta(x, a, b):
    """Return (log I_x(a, b), log(1 - I_x(a, b))) without underflow."""
    log_lower, log_upper, _ = _log_tails(x, a, b)
    return _scalar_or_array(log_lower, x, a, b), _scalar_or_array(log_upper, x, a, b)


def reg_inc_beta_grad(x, a, b):
    """Log tails of I_x(a, b) together with their derivatives in x, a and b."""
    return _log_tails(x, a, b, grad=True)[2]


def log_beta_pdf(x, a, b):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide='ignore'):
        return (a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) - betaln(a, b)


def beta_tail_rates(phi, lam, t):
    """Vectorized search and hit rates of a thresholded beta signal.

    For p ~ beta(phi * lam, (1 - phi) * lam) and a search whenever p >= t,
    returns ``(search_rate, hit_rate, degenerate)`` arrays where
    search_rate = P(p >= t) and hit_rate = E[p | p >= t]. Groups with an
    empty search region get hit_rate 0 and ``degenerate`` True.
    """
    phi, lam, t = np.broadcast_arrays(
        np.asarray(phi, dtype=float), np.asarray(lam, dtype=float), np.asarray(t, dtype=float)
    )
    alpha = phi * lam
    beta = (1.0 - phi) * lam
    _, log_search = log_reg_inc_beta(t, alpha, beta)
    _, log_hit_mass = log_reg_inc_beta(t, alpha + 1.0, beta)
    log_search = np.asarray(log_search, dtype=float)
    log_hit_mass = np.asarray(log_hit_mass, dtype=float)

    search_rate = np.exp(log_search)
    degenerate = ~np.isfinite(log_search) | (search_rate <= 0.0)
    with np.errstate(invalid='ignore', divide='ignore'):
        hit_rate = np.where(degenerate, 0.0, phi * np.exp(log_hit_mass - log_search))
    return search_rate, np.clip(hit_rate, 0.0, 1.0), degenerate


def beta_tail_mean(shape, t):
    """Search rate and hit rate for one beta signal distribution.

    Args:
        shape (BetaShape): Signal distribution.
        t (float): Search threshold in [0, 1].

    Returns:
        TailMoments: ``search_rate`` = 1 - I_t(alpha, beta) and
        ``hit_rate`` = phi (1 - I_t(alpha + 1, beta)) / search_rate.
    """
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"threshold must lie in [0, 1], got {t}")
    search, hit, degenerate = beta_tail_rates(shape.phi, shape.lam, t)
    if bool(degenerate):
        logger.debug(f"Empty search region for {shape} at t={t}")
    return TailMoments(float(search), float(hit), bool(degenerate))
