"""
Posterior draws, their on-disk layout, and convergence diagnostics.

On disk a PosteriorDraws is a directory holding one ``.npy`` file per array
(``params.npy`` is chains x draws x dimension, float64, C order; sampler
statistics are chains x draws) and ``metadata.json`` with parameter names,
step sizes, seed and sampler settings.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DiagnosticsError

logger = logging.getLogger(__name__)

RHAT_CUTOFF = 1.05
MIN_CHAINS = 2
MIN_DRAWS = 10

_ARRAYS = ('params', 'lp', 'accept_stat', 'tree_depth', 'n_leapfrog', 'divergent', 'inv_metric')


@dataclass
class PosteriorDraws:
    params: np.ndarray
    names: tuple
    lp: np.ndarray = None
    accept_stat: np.ndarray = None
    tree_depth: np.ndarray = None
    n_leapfrog: np.ndarray = None
    divergent: np.ndarray = None
    step_sizes: np.ndarray = None
    inv_metric: np.ndarray = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float)
        if self.params.ndim != 3:
            raise DiagnosticsError(f"params must be chains x draws x dimension, got {self.params.shape}")
        self.names = tuple(self.names)
        if len(self.names) != self.params.shape[2]:
            raise DiagnosticsError(f"{len(self.names)} names for {self.params.shape[2]} parameters")
        if self.divergent is None:
            self.divergent = np.zeros(self.params.shape[:2], dtype=bool)
        for name in ('lp', 'accept_stat', 'tree_depth', 'n_leapfrog', 'divergent'):
            value = getattr(self, name)
            if value is not None and np.shape(value) != self.params.shape[:2]:
                raise DiagnosticsError(f"{name} has shape {np.shape(value)}, expected {self.params.shape[:2]}")
        self._index = {name: i for i, name in enumerate(self.names)}

    @property
    def chains(self):
        return self.params.shape[0]

    @property
    def draws_per_chain(self):
        return self.params.shape[1]

    @property
    def dimension(self):
        return self.params.shape[2]

    @property
    def divergence_count(self):
        return int(np.sum(self.divergent))

    @property
    def divergence_rate(self):
        return self.divergence_count / (self.chains * self.draws_per_chain)

    def index(self, name):
        try:
            return self._index[name]
        except KeyError:
            raise DiagnosticsError(f"no parameter named {name!r}") from None

    def __getitem__(self, name):
        """Draws of one parameter, chains x draws."""
        return self.params[:, :, self.index(name)]

    def flat(self, name=None):
        """All chains concatenated: (chains*draws,) for a name, else (chains*draws, dimension)."""
        if name is not None:
            return self[name].reshape(-1)
        return self.params.reshape(-1, self.dimension)

    def summary(self, names=None, interval=0.95):
        """Per-parameter mean, sd, central interval, R-hat and ESS."""
        names = names or self.names
        idx = [self.index(n) for n in names]
        values = self.params[:, :, idx]
        tail = (1.0 - interval) / 2.0
        rhats = rhat(values) if self.chains >= MIN_CHAINS and self.draws_per_chain >= MIN_DRAWS else None
        sizes = ess(values) if self.draws_per_chain >= 4 else None
        rows = []
        for j, name in enumerate(names):
            flat = values[:, :, j].reshape(-1)
            rows.append({
                'name': name,
                'mean': float(flat.mean()),
                'sd': float(flat.std(ddof=1)) if flat.size > 1 else 0.0,
                'lower': float(np.quantile(flat, tail)),
                'upper': float(np.quantile(flat, 1.0 - tail)),
                'rhat': None if rhats is None or np.isnan(rhats[j]) else float(rhats[j]),
                'ess': None if sizes is None or np.isnan(sizes[j]) else float(sizes[j]),
                'degenerate': bool(np.ptp(flat) == 0.0),
            })
        return rows

    def converged(self, cutoff=RHAT_CUTOFF):
        """All non-degenerate R-hat values below ``cutoff``."""
        values = rhat(self)
        finite = values[~np.isnan(values)]
        return bool(np.all(finite < cutoff))

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in _ARRAYS:
            value = getattr(self, name)
            if value is not None:
                np.save(directory / f"{name}.npy", np.ascontiguousarray(value), allow_pickle=False)
        meta = {
            'names': list(self.names),
            'chains': self.chains,
            'draws_per_chain': self.draws_per_chain,
            'step_sizes': None if self.step_sizes is None else np.asarray(self.step_sizes).tolist(),
            'divergence_count': self.divergence_count,
            'metadata': self.metadata,
        }
        with open(directory / 'metadata.json', 'w', encoding='utf-8') as handle:
            json.dump(meta, handle, indent=2, sort_keys=True)
        logger.info(f"Saved {self.chains}x{self.draws_per_chain} draws of {self.dimension} parameters to {directory}")
        return directory

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        with open(directory / 'metadata.json', encoding='utf-8') as handle:
            meta = json.load(handle)
        arrays = {}
        for name in _ARRAYS:
            path = directory / f"{name}.npy"
            if path.exists():
                arrays[name] = np.load(path, allow_pickle=False)
        step_sizes = None if meta.get('step_sizes') is None else np.asarray(meta['step_sizes'])
        return cls(names=meta['names'], step_sizes=step_sizes, metadata=meta.get('metadata', {}), **arrays)

    def to_csv(self, handle, names=None):
        """One row per draw: chain, draw, parameters, lp__, divergent__."""
        names = names or self.names
        idx = [self.index(n) for n in names]
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(['chain', 'draw', *names, 'lp__', 'divergent__'])
        for c in range(self.chains):
            for d in range(self.draws_per_chain):
                lp = '' if self.lp is None else repr(float(self.lp[c, d]))
                writer.writerow([c, d, *(repr(float(v)) for v in self.params[c, d, idx]), lp, int(self.divergent[c, d])])


def _as_samples(draws):
    values = draws.params if isinstance(draws, PosteriorDraws) else np.asarray(draws, dtype=float)
    if values.ndim == 2:
        values = values[:, :, None]
    if values.ndim != 3:
        raise DiagnosticsError(f"expected chains x draws [x dimension], got shape {values.shape}")
    return values


def split_chains(samples):
    """Split each chain in half, doubling chains and halving draws (odd middle draw dropped)."""
    half = samples.shape[1] // 2
    return np.concatenate([samples[:, :half], samples[:, samples.shape[1] - half:]], axis=0)


def rhat(draws):
    """
    Split-chain potential scale reduction factor per parameter.

    R-hat = sqrt(((N-1)/N W + B/N) / W) over split chains of length N, with B
    the between-chain and W the mean within-chain variance, floored at 1 so
    that chains which agree (identical chains in particular) report exactly 1.
    Parameters that are constant within every chain have W = 0 and are
    reported as NaN.

    Raises:
        DiagnosticsError: Fewer than 2 chains or 10 draws per chain.
    """
    samples = _as_samples(draws)
    chains, n_draws, _ = samples.shape
    if chains < MIN_CHAINS or n_draws < MIN_DRAWS:
        raise DiagnosticsError(f"R-hat needs at least {MIN_CHAINS} chains of {MIN_DRAWS} draws")
    split = split_chains(samples)
    n = split.shape[1]
    chain_means = split.mean(axis=1)
    within = split.var(axis=1, ddof=1).mean(axis=0)
    between = n * chain_means.var(axis=0, ddof=1)
    with np.errstate(divide='ignore', invalid='ignore'):
        var_plus = (n - 1) / n * within + between / n
        values = np.maximum(np.sqrt(var_plus / within), 1.0)
    return np.where(within > 0.0, values, np.nan)


def _autocovariance(x):
    """Autocovariance of each row by FFT (biased, lag 0..n-1)."""
    n = x.shape[-1]
    centered = x - x.mean(axis=-1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    spectrum = np.fft.rfft(centered, n=size, axis=-1)
    acov = np.fft.irfft(spectrum * np.conjugate(spectrum), n=size, axis=-1)[..., :n]
    return acov / n


def _ess_one(chains):
    """ESS of one parameter from (chains, draws) with Geyer's initial monotone sequence."""
    m, n = chains.shape
    acov = _autocovariance(chains)
    chain_mean = chains.mean(axis=1)
    chain_var = acov[:, 0] * n / (n - 1.0)
    mean_var = chain_var.mean()
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += chain_mean.var(ddof=1)
    if not var_plus > 0.0:
        return np.nan

    rho = np.zeros(n)
    rho[0] = 1.0
    even = 1.0
    odd = 1.0 - (mean_var - acov[:, 1].mean()) / var_plus
    rho[1] = odd
    t = 1
    while t < n - 3 and even + odd > 0.0:
        even = 1.0 - (mean_var - acov[:, t + 1].mean()) / var_plus
        odd = 1.0 - (mean_var - acov[:, t + 2].mean()) / var_plus
        if even + odd >= 0.0:
            rho[t + 1] = even
            rho[t + 2] = odd
        t += 2
    max_t = t
    if even > 0.0 and max_t + 1 < n:
        rho[max_t + 1] = even

    # enforce a monotone sequence of paired sums
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2

    tail = rho[max_t + 1] if max_t + 1 < n else 0.0
    tau = -1.0 + 2.0 * rho[:max_t + 1].sum() + tail
    tau = max(tau, 1.0 / np.log10(m * n))
    return m * n / tau


def ess(draws):
    """Effective sample size per parameter, computed on split chains."""
    samples = split_chains(_as_samples(draws))
    if samples.shape[1] < 2:
        raise DiagnosticsError("effective sample size needs at least 4 draws per chain")
    return np.array([_ess_one(samples[:, :, j]) for j in range(samples.shape[2])])
