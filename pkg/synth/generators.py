"""
Data drawn from the models the analyses fit, with the truth that produced
it.

Each group (threshold group, count location, binary state x race) draws
from its own random stream, ``RngState(seed, stream).child(index)``, so a
group's data does not depend on how many other groups there are or on the
order they are generated in.
"""

import itertools
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from datetime import timedelta

import numpy as np
import pandas as pd
from scipy.special import expit, logit

from disparity.cells import CountCell, cells_to_frame
from numerics.random import RngState
from records.pipeline import write_standardized
from records.types import Gender, Location, LocationKind, Outcome, Race, SearchType, StopRecord
from threshold.data import ThresholdData

from .config import AGE_BINS, GENDERS

logger = logging.getLogger(__name__)

STRUCTURE_STREAM = 0x5EED
THRESHOLD_STREAM = 0x7412
COUNT_STREAM = 0xC0C0
BINARY_STREAM = 0xB1B1
COUNT_STATE = 'CO'


def _streams(seed, stream, count):
    return [state.generator() for state in RngState(seed, stream).spawn(count)]


def _link(values, inverse, shift):
    with np.errstate(divide='ignore'):
        return inverse(np.asarray(values, dtype=float) + shift)


def _map(function, items, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(function, items))
    return [function(item) for item in items]


def location_label(index):
    return f"loc{index:03d}"


def threshold_truth(config):
    """True (phi, lam, t) per (race, location, period) group, in grid order."""
    rng = RngState(config.seed, STRUCTURE_STREAM).generator()
    z_phi = rng.standard_normal(config.locations)
    z_lam = rng.standard_normal(config.locations)
    z_threshold = rng.standard_normal((len(config.races), config.locations))
    groups = []
    for r, race in enumerate(config.races):
        for d in range(config.locations):
            for period in config.periods:
                post = float(period == 'post')
                with np.errstate(divide='ignore'):
                    base = (logit(config.threshold_phi[r]), np.log(config.threshold_lam[r]),
                            logit(config.threshold_t[r]))
                groups.append({
                    'race': race,
                    'location': location_label(d),
                    'period': period,
                    'phi': float(_link(base[0], expit, config.phi_sd * z_phi[d] + post * config.phi_post[r])),
                    'lam': float(_link(base[1], np.exp, config.lam_sd * z_lam[d] + post * config.lam_post[r])),
                    'threshold': float(_link(
                        base[2], expit, config.threshold_sd * z_threshold[r, d] + post * config.threshold_post[r]
                    )),
                })
    return groups


def draw_group(rng, phi, lam, threshold, stops):
    """
    Stops of one group: signal p ~ beta(phi * lam, (1 - phi) * lam), a
    search whenever p >= threshold, a hit with probability p.

    Returns:
        tuple: (searches, hits)
    """
    p = rng.beta(phi * lam, (1.0 - phi) * lam, size=stops)
    searched = p[p >= threshold]
    hits = rng.random(searched.size) < searched
    return int(searched.size), int(hits.sum())


def gen_threshold(config, workers=None):
    """
    Count table from the threshold model's generative process.

    Returns:
        tuple: (ThresholdData, truth dict with the per-group parameters and
        ``aggregate_thresholds`` per race, plus
        ``aggregate_thresholds_post`` when the config has a post period)
    """
    groups = threshold_truth(config)
    streams = _streams(config.seed, THRESHOLD_STREAM, len(groups))

    def run(index):
        g = groups[index]
        return draw_group(streams[index], g['phi'], g['lam'], g['threshold'], config.stops_per_group)

    counts = _map(run, range(len(groups)), workers)
    frame = pd.DataFrame(groups)
    frame['stops'] = config.stops_per_group
    frame['searches'] = [s for s, _ in counts]
    frame['hits'] = [h for _, h in counts]
    data = ThresholdData.from_frame(frame[['race', 'location', 'period', 'stops', 'searches', 'hits']],
                                    races=config.races)

    truth = {
        'kind': 'threshold',
        'seed': config.seed,
        'groups': groups,
        'aggregate_thresholds': _aggregate(frame, 'pre'),
    }
    if 'post' in config.periods:
        truth['aggregate_thresholds_post'] = _aggregate(frame, 'post')
    logger.info(
        f"Generated threshold data: {data.n_groups} groups x {config.stops_per_group} stops, "
        f"{int(data.searches.sum())} searches"
    )
    return data, truth


def _aggregate(frame, period):
    """Stop-weighted mean threshold per race, weighting locations by their total stops in the period."""
    part = frame[frame['period'] == period]
    weights = part.groupby('location')['stops'].sum()
    out = {}
    for race, rows in part.groupby('race', sort=False):
        w = rows['location'].map(weights).to_numpy(dtype=float)
        out[race] = float(np.average(rows['threshold'].to_numpy(), weights=w))
    return out


def _linear_predictor(effects, **levels):
    return sum(effects.get(f"{factor}[{level}]", 0.0) for factor, level in levels.items())


def gen_counts(config, workers=None):
    """
    Count cells with NegBin stops, mean ``population * exp(eta)`` and
    variance ``mu + mu^2 / phi`` (Poisson when ``count_phi`` is None).

    Returns:
        tuple: (list of CountCell, truth dict)
    """
    strata = list(itertools.product(config.races, AGE_BINS, GENDERS, config.years))
    streams = _streams(config.seed, COUNT_STREAM, config.locations)

    def run(d):
        rng = streams[d]
        cells = []
        for race, age_bin, gender, year in strata:
            pop = config.population or int(rng.integers(*config.population_range))
            mu = pop * np.exp(config.count_intercept
                              + _linear_predictor(config.count_effects, race=race, age_bin=age_bin, gender=gender))
            if config.count_phi is not None:
                mu = rng.gamma(shape=config.count_phi, scale=mu / config.count_phi)
            cells.append(CountCell(COUNT_STATE, f"county:{d:05d}", race, age_bin, gender, int(year),
                                   int(rng.poisson(mu)), float(pop)))
        return cells

    cells = [cell for block in _map(run, range(config.locations), workers) for cell in block]
    truth = {
        'kind': 'counts',
        'seed': config.seed,
        'family': 'poisson' if config.count_phi is None else 'negbin',
        'intercept': config.count_intercept,
        'coefficients': dict(config.count_effects),
        'dispersion': config.count_phi,
    }
    logger.info(f"Generated {len(cells)} count cells, {sum(c.stops for c in cells)} stops")
    return cells, truth


def _state_effects(config):
    rng = RngState(config.seed, STRUCTURE_STREAM).child(1).generator()
    states = (*config.treated_states, *config.control_states)
    return dict(zip(states, (float(v) for v in config.state_sd * rng.standard_normal(len(states)))))


def gen_binary(config, workers=None):
    """
    Stop records whose search indicator follows a logistic model:
    intercept + state effect + race effect + trend * years since
    legalization + the race's treatment effect for treated stops after
    legalization.

    Returns:
        tuple: (list of StopRecord, truth dict)
    """
    state_effects = _state_effects(config)
    treatment = config.treatment_effects or {}
    groups = list(itertools.product(state_effects, config.races))
    streams = _streams(config.seed, BINARY_STREAM, len(groups))
    start, end = config.date_range
    span = (end - start).days + 1
    cutoff = pd.Timestamp(config.legalization_date)

    def run(index):
        state, race = groups[index]
        rng = streams[index]
        n = config.stops_per_group
        days = rng.integers(0, span, n)
        dates = [start + timedelta(days=int(k)) for k in days]
        t = (pd.to_datetime(dates) - cutoff).days.to_numpy() / 365.25
        exposed = (state in config.treated_states) & (t > 0)
        eta = (config.binary_intercept + state_effects[state] + config.binary_effects.get(f"race[{race}]", 0.0)
               + config.time_trend * t + exposed * treatment.get(race, 0.0))
        searched = rng.random(n) < expit(eta)
        found = searched & (rng.random(n) < config.contraband_rate)
        minutes = rng.integers(0, 24 * 60, n)
        counties = rng.integers(0, config.locations, n)
        genders = rng.integers(0, 2, n)
        ages = rng.integers(16, 80, n)
        return [
            StopRecord(
                state=state, stop_date=dates[i], stop_time=int(minutes[i]),
                location=Location(LocationKind.COUNTY, f"{counties[i]:05d}"),
                driver_race=Race(race), driver_gender=(Gender.FEMALE, Gender.MALE)[genders[i]],
                driver_age=int(ages[i]), violations=('speeding',),
                search_conducted=bool(searched[i]),
                search_types=(SearchType.PROBABLE_CAUSE,) if searched[i] else (),
                contraband_found=bool(found[i]) if searched[i] else None,
                outcome=Outcome.CITATION, source_line=i + 2,
            )
            for i in range(n)
        ]

    records = [record for block in _map(run, range(len(groups)), workers) for record in block]
    coefficients = {**config.binary_effects, 't': config.time_trend}
    coefficients.update({f"race[{race}]:Z": treatment.get(race, 0.0) for race in config.races})
    truth = {
        'kind': 'binary',
        'seed': config.seed,
        'intercept': config.binary_intercept,
        'state_effects': state_effects,
        'coefficients': coefficients,
        'legalization_date': config.legalization_date.isoformat(),
        'treated_states': list(config.treated_states),
    }
    logger.info(f"Generated {len(records)} stop records over {len(state_effects)} states")
    return records, truth


def census_from_cells(cells):
    """Population table matching the benchmark of each count cell."""
    frame = cells_to_frame(cells)
    return frame.rename(columns={'benchmark_pop': 'population'})[
        ['state', 'location', 'race', 'age_bin', 'gender', 'year', 'population']
    ]


def write_bundle(config, directory, workers=None):
    """
    Write every synthetic data set plus ``truth.json`` under ``directory``.

    Returns:
        list: Paths written, in a fixed order.
    """
    os.makedirs(directory, exist_ok=True)
    paths = []

    def target(name):
        path = os.path.join(directory, name)
        paths.append(path)
        return path

    data, threshold = gen_threshold(config, workers)
    data.write_csv(target('threshold_counts.csv'))
    cells, counts = gen_counts(config, workers)
    cells_to_frame(cells).to_csv(target('cells.csv'), index=False, lineterminator='\n')
    census_from_cells(cells).to_csv(target('census.csv'), index=False, lineterminator='\n')
    records, binary = gen_binary(config, workers)
    for state in (*config.treated_states, *config.control_states):
        with open(target(f"records_{state}.csv"), 'w', newline='', encoding='utf-8') as handle:
            write_standardized([r for r in records if r.state == state], handle)

    truth = {'config': config.to_dict(), 'threshold': threshold, 'counts': counts, 'binary': binary}
    with open(target('truth.json'), 'w', encoding='utf-8') as handle:
        json.dump(truth, handle, indent=2, sort_keys=True, default=float)
        handle.write('\n')
    logger.info(f"Wrote synthetic bundle to {directory}: {len(paths)} files")
    return paths
