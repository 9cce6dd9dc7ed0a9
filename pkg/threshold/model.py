"""
Hierarchical threshold model.

For a group with race r, location d and period t, the search signal is
beta-distributed with mean phi = expit(phi_r + phi_d [+ phi_rt]) and total
count lam = exp(lam_r + lam_d [+ lam_rt]); officers search when the signal
exceeds the threshold t_rd = expit(nu_r + tau z_rd [+ t_rt]). Location
effects and threshold deviations are non-centred (scale times a standard
normal), so the sampler sees roughly isotropic coordinates.

Each group contributes the multinomial log likelihood of
(no search, search and hit, search and miss):

    (n - s) log I_t(a, b) + h log[phi (1 - I_t(a + 1, b))]
        + (s - h) log[(1 - phi) (1 - I_t(a, b + 1))]

with a = phi lam and b = (1 - phi) lam.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln

from inference.model import LogDensityModel, Transform
from numerics.exceptions import NumericsError
from numerics.special import reg_inc_beta_grad

from .exceptions import NonFiniteLikelihoodError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PriorConfig:
    """Prior scales; recorded in every fit's metadata."""

    race_scale: float = 2.0
    hyper_scale: float = 2.0
    extension_scale: float = 1.0

    def to_dict(self):
        return {
            'phi_race': f"normal(0, {self.race_scale})",
            'lam_race': f"normal(0, {self.race_scale})",
            'threshold_mean': f"normal(0, {self.race_scale})",
            'sigma_phi': f"half-normal(0, {self.hyper_scale})",
            'sigma_lam': f"half-normal(0, {self.hyper_scale})",
            'tau': f"half-normal(0, {self.hyper_scale})",
            'phi_location': 'normal(0, sigma_phi) non-centred',
            'lam_location': 'normal(0, sigma_lam) non-centred',
            'logit_threshold': 'normal(threshold_mean[race], tau) non-centred',
            'post_shifts': f"normal(0, {self.extension_scale})",
        }


@dataclass(frozen=True)
class Layout:
    """Slices of each parameter block in the flat vector."""

    blocks: dict
    size: int
    names: tuple
    transforms: tuple

    def __getitem__(self, name):
        return self.blocks[name]

    def has(self, name):
        return name in self.blocks


def build_layout(data):
    races = data.races
    locations = data.locations
    spec = [
        ('phi_race', [f"phi_race[{r}]" for r in races], Transform.IDENTITY),
        ('lam_race', [f"lam_race[{r}]" for r in races], Transform.IDENTITY),
        ('sigma_phi', ['sigma_phi'], Transform.LOG),
        ('sigma_lam', ['sigma_lam'], Transform.LOG),
        ('z_phi', [f"z_phi[{d}]" for d in locations], Transform.IDENTITY),
        ('z_lam', [f"z_lam[{d}]" for d in locations], Transform.IDENTITY),
        ('threshold_mean', [f"threshold_mean[{r}]" for r in races], Transform.IDENTITY),
        ('tau', ['tau'], Transform.LOG),
        ('z_threshold', [f"z_threshold[{data.cell_label(k)}]" for k in range(data.n_cells)], Transform.IDENTITY),
    ]
    if data.has_post:
        spec += [
            ('phi_post', [f"phi_post[{r}]" for r in races], Transform.IDENTITY),
            ('lam_post', [f"lam_post[{r}]" for r in races], Transform.IDENTITY),
            ('threshold_post', [f"threshold_post[{r}]" for r in races], Transform.IDENTITY),
        ]
    blocks, names, transforms = {}, [], []
    start = 0
    for name, labels, transform in spec:
        blocks[name] = slice(start, start + len(labels))
        start += len(labels)
        names.extend(labels)
        transforms.extend([transform] * len(labels))
    return Layout(blocks, start, tuple(names), tuple(transforms))


def _multiply(counts, values):
    """counts * values with 0 * (-inf or nan) taken as 0."""
    return np.where(counts > 0, counts * values, 0.0)


def group_log_likelihood(stops, searches, hits, phi, lam, t, normalized=False, grad=False):
    """
    Per-group log likelihood of search and hit counts.

    Args:
        stops, searches, hits: Count arrays.
        phi, lam, t: Signal mean, signal total count and threshold per group;
            ``t`` may be 0 or 1 exactly.
        normalized (bool): Add the multinomial coefficient, giving the
            log of Binomial(s; n, S) * Binomial(h; s, H).
        grad (bool): Also return derivatives in phi, lam and t.

    Returns:
        ndarray, or (ndarray, (d_phi, d_lam, d_t)) when ``grad`` is set.
    """
    n, s, h = (np.asarray(v, dtype=float) for v in (stops, searches, hits))
    phi, lam, t = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (phi, lam, t)))
    a = phi * lam
    b = (1.0 - phi) * lam
    none = reg_inc_beta_grad(t, a, b)
    hit = reg_inc_beta_grad(t, a + 1.0, b)
    miss = reg_inc_beta_grad(t, a, b + 1.0)

    with np.errstate(divide='ignore', invalid='ignore'):
        values = (
            _multiply(n - s, none.log_lower)
            + _multiply(h, np.log(phi) + hit.log_upper)
            + _multiply(s - h, np.log1p(-phi) + miss.log_upper)
        )
    if normalized:
        values = values + gammaln(n + 1.0) - gammaln(n - s + 1.0) - gammaln(s - h + 1.0) - gammaln(h + 1.0)
    if not grad:
        return values

    with np.errstate(invalid='ignore'):
        d_a = _multiply(n - s, none.dlower_da) + _multiply(h, hit.dupper_da) + _multiply(s - h, miss.dupper_da)
        d_b = _multiply(n - s, none.dlower_db) + _multiply(h, hit.dupper_db) + _multiply(s - h, miss.dupper_db)
        d_t = _multiply(n - s, none.dlower_dx) + _multiply(h, hit.dupper_dx) + _multiply(s - h, miss.dupper_dx)
        d_phi = lam * (d_a - d_b) + _multiply(h, 1.0 / phi) - _multiply(s - h, 1.0 / (1.0 - phi))
        d_lam = phi * d_a + (1.0 - phi) * d_b
    return values, (d_phi, d_lam, d_t)


@dataclass
class ThresholdParams:
    """Named parameter blocks on the constrained scale."""

    phi_race: np.ndarray
    lam_race: np.ndarray
    sigma_phi: float
    sigma_lam: float
    z_phi: np.ndarray
    z_lam: np.ndarray
    threshold_mean: np.ndarray
    tau: float
    z_threshold: np.ndarray
    phi_post: np.ndarray = None
    lam_post: np.ndarray = None
    threshold_post: np.ndarray = None


class ThresholdModel:
    """Log posterior of the threshold model for one ThresholdData."""

    def __init__(self, data, prior=None):
        self.data = data
        self.prior = prior or PriorConfig()
        self.layout = build_layout(data)
        self.post = data.period.astype(float)

    @property
    def dimension(self):
        return self.layout.size

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=float)
        lay = self.layout
        values = {name: theta[..., lay[name]] for name in lay.blocks}
        for name in ('sigma_phi', 'sigma_lam', 'tau'):
            values[name] = values[name][..., 0]
        return ThresholdParams(**values)

    def pack(self, params):
        theta = np.zeros(self.dimension)
        for name, block in self.layout.blocks.items():
            theta[block] = getattr(params, name)
        return theta

    def group_parameters(self, theta):
        """
        Signal mean, total count and threshold per group for one or many draws.

        ``theta`` is (dimension,) or (draws, dimension); results follow with
        a trailing group axis.
        """
        p = self.unpack(theta)
        d = self.data
        a = p.phi_race[..., d.race] + p.sigma_phi[..., None] * p.z_phi[..., d.location]
        b = p.lam_race[..., d.race] + p.sigma_lam[..., None] * p.z_lam[..., d.location]
        c = p.threshold_mean[..., d.race] + p.tau[..., None] * p.z_threshold[..., d.cell]
        if self.layout.has('phi_post'):
            a = a + self.post * p.phi_post[..., d.race]
            b = b + self.post * p.lam_post[..., d.race]
            c = c + self.post * p.threshold_post[..., d.race]
        return expit(a), np.exp(b), expit(c)

    def cell_thresholds(self, theta, period='pre'):
        """Threshold of each (race, location) cell, shape (..., n_cells)."""
        p = self.unpack(theta)
        d = self.data
        c = p.threshold_mean[..., d.cell_race] + p.tau[..., None] * p.z_threshold
        if period == 'post' and self.layout.has('threshold_post'):
            c = c + p.threshold_post[..., d.cell_race]
        return expit(c)

    def log_prior(self, theta, grad=False):
        p = self.unpack(theta)
        lay = self.layout
        race_var = self.prior.race_scale ** 2
        hyper_var = self.prior.hyper_scale ** 2
        ext_var = self.prior.extension_scale ** 2
        g = np.zeros(self.dimension)
        value = 0.0
        for name, var in (('phi_race', race_var), ('lam_race', race_var), ('threshold_mean', race_var),
                          ('z_phi', 1.0), ('z_lam', 1.0), ('z_threshold', 1.0),
                          ('phi_post', ext_var), ('lam_post', ext_var), ('threshold_post', ext_var)):
            if not lay.has(name):
                continue
            x = getattr(p, name)
            value -= 0.5 * float(x @ x) / var
            g[lay[name]] = -x / var
        for name in ('sigma_phi', 'sigma_lam', 'tau'):
            x = float(getattr(p, name))
            value -= 0.5 * x * x / hyper_var
            g[lay[name]] = -x / hyper_var
        return (value, g) if grad else value

    def log_likelihood(self, theta, grad=False):
        phi, lam, t = self.group_parameters(theta)
        d = self.data
        if not grad:
            return float(np.sum(group_log_likelihood(d.stops, d.searches, d.hits, phi, lam, t)))

        values, (d_phi, d_lam, d_t) = group_log_likelihood(d.stops, d.searches, d.hits, phi, lam, t, grad=True)
        # derivatives on the linear-predictor scale
        g_a = d_phi * phi * (1.0 - phi)
        g_b = d_lam * lam
        g_c = d_t * t * (1.0 - t)

        p = self.unpack(theta)
        lay = self.layout
        R, D, K = len(d.races), len(d.locations), d.n_cells
        g = np.zeros(self.dimension)
        g[lay['phi_race']] = np.bincount(d.race, weights=g_a, minlength=R)
        g[lay['lam_race']] = np.bincount(d.race, weights=g_b, minlength=R)
        loc_a = np.bincount(d.location, weights=g_a, minlength=D)
        loc_b = np.bincount(d.location, weights=g_b, minlength=D)
        g[lay['z_phi']] = p.sigma_phi * loc_a
        g[lay['z_lam']] = p.sigma_lam * loc_b
        g[lay['sigma_phi']] = float(loc_a @ p.z_phi)
        g[lay['sigma_lam']] = float(loc_b @ p.z_lam)
        g[lay['threshold_mean']] = np.bincount(d.race, weights=g_c, minlength=R)
        cell_c = np.bincount(d.cell, weights=g_c, minlength=K)
        g[lay['z_threshold']] = p.tau * cell_c
        g[lay['tau']] = float(cell_c @ p.z_threshold)
        if lay.has('phi_post'):
            g[lay['phi_post']] = np.bincount(d.race, weights=g_a * self.post, minlength=R)
            g[lay['lam_post']] = np.bincount(d.race, weights=g_b * self.post, minlength=R)
            g[lay['threshold_post']] = np.bincount(d.race, weights=g_c * self.post, minlength=R)
        return float(np.sum(values)), g

    def log_posterior(self, theta, strict=False):
        """
        Log posterior and its gradient on the constrained scale.

        Args:
            theta: Flat parameter vector or ThresholdParams.
            strict (bool): Raise NonFiniteLikelihoodError naming the offending
                groups instead of returning -inf.
        """
        if isinstance(theta, ThresholdParams):
            theta = self.pack(theta)
        prior, g_prior = self.log_prior(theta, grad=True)
        try:
            like, g_like = self.log_likelihood(theta, grad=True)
        except NumericsError:
            # signal shapes saturated to 0 or infinity
            if strict:
                raise NonFiniteLikelihoodError(self.data.labels(range(self.data.n_groups))) from None
            return -np.inf, np.full(self.dimension, np.nan)
        value = prior + like
        if not np.isfinite(value) and strict:
            phi, lam, t = self.group_parameters(theta)
            d = self.data
            per_group = group_log_likelihood(d.stops, d.searches, d.hits, phi, lam, t)
            raise NonFiniteLikelihoodError(d.labels(np.flatnonzero(~np.isfinite(per_group))))
        return value, g_prior + g_like

    def density(self):
        """The posterior as a LogDensityModel over unconstrained coordinates."""
        return LogDensityModel.from_constrained(
            self.log_posterior, self.layout.transforms, self.layout.names,
        )
