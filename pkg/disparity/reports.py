"""
Plot-ready tables for the disparity analyses: one row per location and
minority race, set against the white rate at the same location.
"""

import logging

import pandas as pd
from django.conf import settings

from .analysis import RACES, as_frame
from .cells import cells_to_frame

logger = logging.getLogger(__name__)

BASE_RACE = 'White'
SCATTER_COLUMNS = ('state', 'location', 'race', 'base_rate', 'minority_rate', 'base_stops', 'minority_stops', 'stops')


def _min_stops(min_stops):
    if min_stops is not None:
        return min_stops
    return getattr(settings, 'TRAFFIC_STOPS', {}).get('PLOT_MIN_STOPS', 0)


def _pair(table, min_stops):
    """Pair each minority rate with the white rate at the same location."""
    rows = []
    base = table[table['race'] == BASE_RACE].set_index(['state', 'location'])
    for _, row in table[table['race'] != BASE_RACE].iterrows():
        key = (row['state'], row['location'])
        if key not in base.index:
            continue
        reference = base.loc[key]
        total = int(reference['stops'] + row['stops'])
        if total < min_stops or pd.isna(reference['rate']) or pd.isna(row['rate']):
            continue
        rows.append({
            'state': row['state'], 'location': row['location'], 'race': row['race'],
            'base_rate': float(reference['rate']), 'minority_rate': float(row['rate']),
            'base_stops': int(reference['stops']), 'minority_stops': int(row['stops']), 'stops': total,
        })
    return pd.DataFrame(rows, columns=list(SCATTER_COLUMNS))


def stop_rate_points(cells, min_stops=None):
    """Stops per driving-age resident by location and race, pooled over strata."""
    frame = cells if isinstance(cells, pd.DataFrame) else cells_to_frame(cells)
    table = frame.groupby(['state', 'location', 'race'], as_index=False).agg(
        stops=('stops', 'sum'), population=('benchmark_pop', 'sum'),
    )
    table['rate'] = table['stops'] / table['population'].where(table['population'] > 0)
    return _pair(table, _min_stops(min_stops))


def poststop_rate_points(records, outcome, min_stops=None):
    """
    Search or arrest rate among stopped drivers by location and race.

    ``outcome`` is ``search`` or ``arrest``.
    """
    frame = as_frame(records)
    frame = frame[frame['race'].isin(RACES) & frame['location'].notna()]
    if outcome == 'search':
        frame = frame[frame['search_conducted'].notna()]
        event = frame['search_conducted'].astype(bool)
    elif outcome == 'arrest':
        frame = frame[frame['outcome'] != 'Unknown']
        event = frame['outcome'] == 'Arrest'
    else:
        raise ValueError(f"no location rate for outcome {outcome!r}")
    table = frame.assign(event=event).groupby(['state', 'location', 'race'], as_index=False).agg(
        stops=('event', 'size'), events=('event', 'sum'),
    )
    table['rate'] = table['events'] / table['stops']
    return _pair(table, _min_stops(min_stops))


def hit_rate_points(result, min_searches=None):
    """
    Hit rates per location from an outcome test (or its saved location
    table); ``stops`` counts searches here.
    """
    table = result if isinstance(result, pd.DataFrame) else pd.DataFrame([r.to_dict() for r in result.rows])
    if table.empty:
        return pd.DataFrame(columns=list(SCATTER_COLUMNS))
    table = table.rename(columns={'searches': 'stops', 'hit_rate': 'rate'})
    return _pair(table, _min_stops(min_searches))


def battery_table(entries):
    """Coefficient table: one row per outcome x covariates (x family) combination."""
    return pd.DataFrame([entry.row() for entry in entries])


def outcome_test_tables(result):
    """(per-location rows, aggregate rows) of an outcome test."""
    rows = pd.DataFrame([r.to_dict() for r in result.rows])
    aggregate = pd.DataFrame([
        {'race': race, 'searches': searches, 'hits': hits, 'hit_rate': result.aggregate_rate(race),
         'states': ','.join(result.states), 'aggregate_only_states': ','.join(result.aggregate_only_states)}
        for race, (searches, hits) in result.aggregate.items()
    ])
    return rows, aggregate
