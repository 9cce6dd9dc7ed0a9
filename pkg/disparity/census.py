"""
Driving-age population benchmarks.

The population table is long format, one row per
(state, location, race, age_bin, gender, year) with a ``population`` count.
Locations are county FIPS codes, with or without the ``county:`` tag.
District-coded states get their populations by summing the counties each
district subsumes.
"""

import io
import logging

import pandas as pd
from django.conf import settings

from records.utils import cached_reference

from .exceptions import CensusError

logger = logging.getLogger(__name__)

CENSUS_COLUMNS = ('state', 'location', 'race', 'age_bin', 'gender', 'year', 'population')
KEY_COLUMNS = CENSUS_COLUMNS[:-1]


def _tag(location):
    location = str(location).strip()
    return location if ':' in location else f"county:{location}"


def read_census(source):
    """Parse a population CSV (path, file object or text) into a frame."""
    if isinstance(source, str) and '\n' in source:
        source = io.StringIO(source)
    frame = pd.read_csv(source, dtype={'location': str, 'state': str})
    missing = [c for c in CENSUS_COLUMNS if c not in frame.columns]
    if missing:
        raise CensusError(f"population table lacks columns {missing}")
    frame = frame[list(CENSUS_COLUMNS)].copy()
    if frame['population'].isna().any() or (frame['population'] < 0).any():
        raise CensusError("population counts must be present and non-negative")
    frame['state'] = frame['state'].str.upper()
    frame['location'] = frame['location'].map(_tag)
    frame['year'] = frame['year'].astype(int)
    if frame.duplicated(list(KEY_COLUMNS)).any():
        raise CensusError("population table has duplicate strata")
    logger.info(f"Population table: {len(frame)} strata over {frame['location'].nunique()} locations")
    return frame.reset_index(drop=True)


def load_census(path):
    """Population table through the reference cache; returns (frame, content hash)."""
    return cached_reference('census', path, lambda data: read_census(data.decode('utf-8')))


def with_districts(census, tables, states=None):
    """
    Add district rows for district-coded states.

    Args:
        census (DataFrame): County-level population table.
        tables (ReferenceTables): Holds the district -> counties lookup.
        states: District-coded states; ``DISTRICT_STATES`` from settings.

    Returns:
        DataFrame: ``census`` plus one row per district stratum, each the
        sum over the district's counties.
    """
    states = set(states if states is not None else settings.TRAFFIC_STOPS.get('DISTRICT_STATES', ()))
    pieces = [census]
    for (state, district), counties in sorted(tables.district_counties.items()):
        if state not in states:
            continue
        members = {_tag(c) for c in tables.counties_for(state, district)}
        rows = census[(census['state'] == state) & census['location'].isin(members)]
        found = set(rows['location'])
        if found != members:
            logger.warning(f"{state} district {district}: no population for counties {sorted(members - found)}")
        if rows.empty:
            continue
        summed = rows.groupby(['race', 'age_bin', 'gender', 'year'], as_index=False)['population'].sum()
        summed.insert(0, 'location', f"district:{district}")
        summed.insert(0, 'state', state)
        pieces.append(summed[list(CENSUS_COLUMNS)])
    combined = pd.concat(pieces, ignore_index=True)
    logger.info(f"Added {len(combined) - len(census)} district strata for {sorted(states)}")
    return combined
