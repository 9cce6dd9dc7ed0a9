"""
Fitting the threshold model and summarizing its posterior.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from django.conf import settings

from glm.exceptions import ConvergenceWarning
from inference.diagnostics import PosteriorDraws, ess, rhat
from inference.nuts import SamplerConfig, nuts_sample
from numerics.random import RngState
from numerics.special import beta_tail_rates

from .data import PERIODS
from .exceptions import ThresholdError
from .model import ThresholdModel

logger = logging.getLogger(__name__)

INTERVAL = 0.95
PPC_CHUNK = 256
PPC_STREAM = 0x99C


def _setting(name, default):
    return getattr(settings, 'TRAFFIC_STOPS', {}).get(name, default)


def _interval(values, interval=INTERVAL, axis=0):
    tail = (1.0 - interval) / 2.0
    return np.quantile(values, tail, axis=axis), np.quantile(values, 1.0 - tail, axis=axis)


@dataclass(frozen=True)
class AggregateThreshold:
    race: str
    period: str
    mean: float
    lower: float
    upper: float

    def to_dict(self):
        return {'race': self.race, 'period': self.period, 'mean': self.mean,
                'lower': self.lower, 'upper': self.upper}


@dataclass
class ThresholdFit:
    data: object
    model: ThresholdModel
    draws: PosteriorDraws
    converged: bool
    max_rhat: float
    min_ess: float
    flags: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def thresholds(self, period='pre'):
        """Posterior draws of every cell threshold, (total draws, n_cells)."""
        return self.model.cell_thresholds(self.draws.flat(), period)

    def cell_summary(self, period='pre', interval=INTERVAL):
        draws = self.thresholds(period)
        lower, upper = _interval(draws, interval)
        mean = draws.mean(axis=0)
        stops = self.data.location_stops()
        d = self.data
        return [
            {
                'race': d.races[d.cell_race[k]],
                'location': d.locations[d.cell_location[k]],
                'period': period,
                'mean': float(mean[k]),
                'lower': float(lower[k]),
                'upper': float(upper[k]),
                'location_stops': int(stops[d.cell_location[k]]),
            }
            for k in range(d.n_cells)
        ]

    def aggregates(self, period='pre', interval=INTERVAL):
        return aggregate_thresholds(self, period=period, interval=interval)

    def to_dict(self):
        periods = PERIODS if self.data.has_post else ('pre',)
        return {
            'converged': self.converged,
            'max_rhat': self.max_rhat,
            'min_ess': self.min_ess,
            'divergences': self.draws.divergence_count,
            'flags': list(self.flags),
            'aggregates': [a.to_dict() for p in periods for a in self.aggregates(p).values()],
            'thresholds': [row for p in periods for row in self.cell_summary(p)],
            'metadata': self.metadata,
        }


def _diagnose(draws):
    values = rhat(draws)
    finite = values[~np.isnan(values)]
    sizes = ess(draws)
    sizes = sizes[~np.isnan(sizes)]
    max_rhat = float(finite.max()) if finite.size else float('nan')
    min_ess = float(sizes.min()) if sizes.size else float('nan')
    return max_rhat, min_ess


def fit(data, config=None, seed=None, prior=None):
    """
    Sample the threshold-model posterior for one data set.

    Args:
        data (ThresholdData): Output of ``prepare`` or ``ThresholdData.read_csv``.
        config (SamplerConfig): Defaults from settings (5 chains, 2,500 warmup
            and 2,500 draws each).
        seed (int): Base seed; settings ``SEED`` when omitted.
        prior (PriorConfig): Prior scales.

    Returns:
        ThresholdFit: Draws plus diagnostics. A fit whose largest R-hat is
        not below the cutoff is returned flagged ``not_converged``.
    """
    config = config or SamplerConfig.from_settings()
    seed = _setting('SEED', 0) if seed is None else seed
    model = ThresholdModel(data, prior)
    logger.info(
        f"Fitting threshold model: {data.n_groups} groups, {model.dimension} parameters, "
        f"{config.chains} chains x ({config.warmup} + {config.draws})"
    )
    draws = nuts_sample(model.density(), config, seed=seed)
    flags = list(data.flags) + list(draws.metadata.get('flags', []))

    cutoff = _setting('RHAT_CUTOFF', 1.05)
    if config.chains >= 2:
        max_rhat, min_ess = _diagnose(draws)
        converged = bool(max_rhat < cutoff)
    else:
        max_rhat, min_ess, converged = float('nan'), float('nan'), False
    if not converged:
        message = f"threshold model did not converge (max R-hat {max_rhat:.3f}, cutoff {cutoff})"
        logger.warning(message)
        warnings.warn(message, ConvergenceWarning, stacklevel=2)
        flags.append('not_converged')
    else:
        logger.info(f"Threshold model converged: max R-hat {max_rhat:.3f}, min ESS {min_ess:.0f}")

    metadata = {
        'seed': seed,
        'sampler': config.to_dict(),
        'priors': model.prior.to_dict(),
        'rhat_cutoff': cutoff,
        'races': list(data.races),
        'locations': len(data.locations),
        'groups': data.n_groups,
    }
    return ThresholdFit(data, model, draws, converged, max_rhat, min_ess, flags, metadata)


def aggregate_thresholds(thresholds, data=None, period='pre', interval=INTERVAL):
    """
    Stop-weighted average threshold per race, summarized across draws.

    Args:
        thresholds: A ThresholdFit, PosteriorDraws (needs ``data``), or an
            array of cell thresholds shaped (draws, n_cells) or (n_cells,).
        data (ThresholdData): Needed unless a ThresholdFit is given.
        period (str): Which period's thresholds and stop weights to use.

    Returns:
        dict: race -> AggregateThreshold (posterior mean and central interval).
    """
    if isinstance(thresholds, ThresholdFit):
        data = thresholds.data
        values = thresholds.thresholds(period)
    elif isinstance(thresholds, PosteriorDraws):
        if data is None:
            raise ThresholdError("aggregate_thresholds needs the data the draws were fitted on")
        values = ThresholdModel(data).cell_thresholds(thresholds.flat(), period)
    else:
        if data is None:
            raise ThresholdError("aggregate_thresholds needs the data the thresholds belong to")
        values = np.atleast_2d(np.asarray(thresholds, dtype=float))
    if values.shape[-1] != data.n_cells:
        raise ThresholdError(f"{values.shape[-1]} thresholds for {data.n_cells} cells")

    out = {}
    for race, per_draw in aggregate_draws(values, data, period).items():
        lower, upper = _interval(per_draw, interval)
        out[race] = AggregateThreshold(race, period, float(per_draw.mean()), float(lower), float(upper))
    return out


@dataclass
class PredictiveCheck:
    rows: list
    search_rmse: float
    hit_rmse: float
    search_coverage: float
    hit_coverage: float
    draws_used: int

    def to_dict(self):
        return {
            'search_rmse': self.search_rmse,
            'hit_rmse': self.hit_rmse,
            'search_coverage': self.search_coverage,
            'hit_coverage': self.hit_coverage,
            'draws_used': self.draws_used,
        }


def ppc(fit, interval=INTERVAL, max_draws=None, seed=None):
    """
    Posterior predictive check of search and hit rates per group.

    Predicted rates are the analytic search and hit rates averaged over
    posterior draws. Intervals come from replicated counts: searches
    ~ Binomial(stops, S) and hits ~ Binomial(observed searches, H), so the
    hit interval is conditional on the searches actually made. Groups with
    no searches report a predicted hit rate and an undefined observed one.
    """
    data = fit.data
    theta = fit.draws.flat()
    if max_draws is not None and theta.shape[0] > max_draws:
        theta = theta[np.linspace(0, theta.shape[0] - 1, max_draws).astype(int)]
    rng = RngState(fit.metadata.get('seed', 0) if seed is None else seed, PPC_STREAM).generator()

    n, s, h = data.stops, data.searches, data.hits
    search_sum = np.zeros(data.n_groups)
    hit_sum = np.zeros(data.n_groups)
    hit_weight = np.zeros(data.n_groups)
    rep_search, rep_hit = [], []
    for start in range(0, theta.shape[0], PPC_CHUNK):
        phi, lam, t = fit.model.group_parameters(theta[start:start + PPC_CHUNK])
        search_rate, hit_rate, degenerate = beta_tail_rates(phi, lam, t)
        search_sum += search_rate.sum(axis=0)
        hit_sum += np.where(degenerate, 0.0, hit_rate).sum(axis=0)
        hit_weight += (~degenerate).sum(axis=0)
        rep_search.append(rng.binomial(n, search_rate) / n)
        with np.errstate(invalid='ignore', divide='ignore'):
            rep_hit.append(np.where(s > 0, rng.binomial(s, hit_rate) / np.maximum(s, 1), np.nan))

    total = theta.shape[0]
    predicted_search = search_sum / total
    with np.errstate(invalid='ignore', divide='ignore'):
        predicted_hit = np.where(hit_weight > 0, hit_sum / hit_weight, np.nan)
    search_low, search_high = _interval(np.concatenate(rep_search), interval)
    hits = np.concatenate(rep_hit)
    observed_search = s / n
    rows = []
    for g in range(data.n_groups):
        observed_hit = h[g] / s[g] if s[g] > 0 else None
        hit_low = hit_high = None
        if s[g] > 0:
            hit_low, hit_high = (float(v) for v in _interval(hits[:, g], interval))
        rows.append({
            'race': data.races[data.race[g]],
            'location': data.locations[data.location[g]],
            'period': PERIODS[data.period[g]],
            'stops': int(n[g]),
            'searches': int(s[g]),
            'hits': int(h[g]),
            'observed_search_rate': float(observed_search[g]),
            'predicted_search_rate': float(predicted_search[g]),
            'search_error': float(predicted_search[g] - observed_search[g]),
            'search_lower': float(search_low[g]),
            'search_upper': float(search_high[g]),
            'observed_hit_rate': observed_hit,
            'predicted_hit_rate': float(predicted_hit[g]),
            'hit_error': None if observed_hit is None else float(predicted_hit[g] - observed_hit),
            'hit_lower': hit_low,
            'hit_upper': hit_high,
            'hit_rate_undefined': observed_hit is None,
        })

    weights = n / n.sum()
    search_rmse = float(np.sqrt(weights @ (predicted_search - observed_search) ** 2))
    searched = s > 0
    hit_errors = np.array([r['hit_error'] for r in rows if r['hit_error'] is not None])
    hit_w = n[searched] / n[searched].sum() if searched.any() else np.array([])
    hit_rmse = float(np.sqrt(hit_w @ hit_errors ** 2)) if searched.any() else float('nan')
    search_inside = (observed_search >= search_low) & (observed_search <= search_high)
    hit_inside = [r['hit_lower'] <= r['observed_hit_rate'] <= r['hit_upper'] for r in rows if r['searches'] > 0]
    check = PredictiveCheck(
        rows=rows,
        search_rmse=search_rmse,
        hit_rmse=hit_rmse,
        search_coverage=float(search_inside.mean()),
        hit_coverage=float(np.mean(hit_inside)) if hit_inside else float('nan'),
        draws_used=total,
    )
    logger.info(
        f"Posterior predictive check over {total} draws: search RMSE {search_rmse:.4f}, "
        f"coverage {check.search_coverage:.1%} (search) / {check.hit_coverage:.1%} (hit)"
    )
    return check


def fit_prepost(data, config=None, seed=None, prior=None):
    """
    Fit the time-varying model: race-level shifts in signal mean, signal
    count and (logit) threshold for post-period groups.

    Returns:
        ThresholdFit: ``prepost_summary`` gives per (race, period) aggregates.
        Races with no searches in a period are flagged; their intervals
        rest on the prior.
    """
    result = fit(data, config, seed, prior)
    for r, race in enumerate(data.races):
        for p, period in enumerate(PERIODS):
            mask = (data.race == r) & (data.period == p)
            if mask.any() and data.searches[mask].sum() == 0:
                message = f"no {race} searches in the {period} period; its threshold interval is degenerate"
                logger.warning(message)
                result.flags.append(f"no_searches:{race}:{period}")
    if not data.has_post:
        logger.warning("fit_prepost called without post-period groups; this is the static model")
    return result


def prepost_summary(result, interval=INTERVAL):
    """Aggregate thresholds per (race, period) with the post - pre change."""
    rows = []
    periods = PERIODS if result.data.has_post else ('pre',)
    values = {p: result.thresholds(p) for p in periods}
    for period in periods:
        for aggregate in aggregate_thresholds(values[period], result.data, period, interval).values():
            rows.append(aggregate.to_dict())
    if result.data.has_post:
        pre = aggregate_draws(values['pre'], result.data, 'pre')
        post = aggregate_draws(values['post'], result.data, 'post')
        for race in pre:
            change = post[race] - pre[race]
            lower, upper = _interval(change, interval)
            rows.append({'race': race, 'period': 'change', 'mean': float(change.mean()),
                         'lower': float(lower), 'upper': float(upper)})
    return rows


def aggregate_draws(values, data, period):
    """Per-draw stop-weighted thresholds by race (no summarizing)."""
    weights = data.location_stops(period if np.any(data.period == PERIODS.index(period)) else None)
    out = {}
    for r, race in enumerate(data.races):
        cells = np.flatnonzero(data.cell_race == r)
        w = weights[data.cell_location[cells]]
        if w.sum() > 0:
            out[race] = values[:, cells] @ (w / w.sum())
    return out
