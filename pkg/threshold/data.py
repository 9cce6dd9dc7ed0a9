"""
Aggregated stop / search / hit counts per (race, location[, period]) group.
"""

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from records.pipeline import records_to_frame

from .exceptions import DegenerateHierarchyError, SparsityWarning, ThresholdError

logger = logging.getLogger(__name__)

RACES = ('White', 'Black', 'Hispanic')
PERIODS = ('pre', 'post')
MIN_STOPS = 1000
MAX_LOCATIONS = 100
# a (race, location) group with fewer searches than this is "sparse"
SPARSE_SEARCHES = 5
SPARSE_SHARE = 0.5

COLUMNS = ('race', 'location', 'period', 'stops', 'searches', 'hits')


@dataclass(frozen=True)
class ThresholdData:
    """
    Count table for the threshold test.

    Groups are rows; ``race``, ``location`` and ``period`` are integer codes
    into ``races``, ``locations`` and ``PERIODS``. Each distinct
    (race, location) pair is a threshold cell; pre and post groups of the
    same pair share a cell.
    """

    races: tuple
    locations: tuple
    race: np.ndarray
    location: np.ndarray
    period: np.ndarray
    stops: np.ndarray
    searches: np.ndarray
    hits: np.ndarray
    flags: tuple = ()

    def __post_init__(self):
        for name in ('race', 'location', 'period', 'stops', 'searches', 'hits'):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        n = self.race.size
        if any(getattr(self, k).shape != (n,) for k in ('location', 'period', 'stops', 'searches', 'hits')):
            raise ThresholdError("group arrays must share one length")
        if np.any(self.hits < 0) or np.any(self.hits > self.searches) or np.any(self.searches > self.stops):
            bad = np.flatnonzero((self.hits < 0) | (self.hits > self.searches) | (self.searches > self.stops))
            raise ThresholdError(f"counts violate 0 <= hits <= searches <= stops in groups {self.labels(bad)}")
        if np.any(self.stops <= 0):
            raise ThresholdError("every group needs at least one stop")
        keys = self.race * len(self.locations) + self.location
        cells, cell = np.unique(keys, return_inverse=True)
        object.__setattr__(self, 'cell', cell.astype(np.int64))
        object.__setattr__(self, 'cell_race', (cells // len(self.locations)).astype(np.int64))
        object.__setattr__(self, 'cell_location', (cells % len(self.locations)).astype(np.int64))
        if np.unique(keys * 2 + self.period).size != n:
            raise ThresholdError("duplicate (race, location, period) groups")

    @property
    def n_groups(self):
        return self.race.size

    @property
    def n_cells(self):
        return self.cell_race.size

    @property
    def has_post(self):
        return bool(np.any(self.period == 1))

    def label(self, g):
        return f"{self.races[self.race[g]]}|{self.locations[self.location[g]]}|{PERIODS[self.period[g]]}"

    def labels(self, indices):
        return [self.label(g) for g in indices]

    def cell_label(self, k):
        return f"{self.races[self.cell_race[k]]}|{self.locations[self.cell_location[k]]}"

    def location_stops(self, period=None):
        """Total stops per location across races (optionally in one period)."""
        mask = np.ones(self.n_groups, dtype=bool) if period is None else self.period == PERIODS.index(period)
        return np.bincount(self.location[mask], weights=self.stops[mask], minlength=len(self.locations))

    def to_frame(self):
        return pd.DataFrame({
            'race': [self.races[i] for i in self.race],
            'location': [self.locations[i] for i in self.location],
            'period': [PERIODS[i] for i in self.period],
            'stops': self.stops,
            'searches': self.searches,
            'hits': self.hits,
        }, columns=list(COLUMNS))

    @classmethod
    def from_frame(cls, frame, races=RACES, flags=()):
        missing = [c for c in ('race', 'location', 'stops', 'searches', 'hits') if c not in frame.columns]
        if missing:
            raise ThresholdError(f"count table lacks columns {missing}")
        frame = frame.copy()
        if 'period' not in frame.columns:
            frame['period'] = 'pre'
        unknown = set(frame['period']) - set(PERIODS)
        if unknown:
            raise ThresholdError(f"unknown periods {sorted(unknown)}")
        unknown = set(frame['race']) - set(races)
        if unknown:
            raise ThresholdError(f"races {sorted(unknown)} not in {list(races)}")
        frame['location'] = frame['location'].astype(str)
        frame = frame.sort_values(['location', 'race', 'period'], key=_sort_key(races)).reset_index(drop=True)
        locations = tuple(sorted(frame['location'].unique()))
        present_races = tuple(r for r in races if r in set(frame['race']))
        return cls(
            races=present_races,
            locations=locations,
            race=frame['race'].map({r: i for i, r in enumerate(present_races)}).to_numpy(),
            location=frame['location'].map({d: i for i, d in enumerate(locations)}).to_numpy(),
            period=frame['period'].map({p: i for i, p in enumerate(PERIODS)}).to_numpy(),
            stops=frame['stops'].to_numpy(),
            searches=frame['searches'].to_numpy(),
            hits=frame['hits'].to_numpy(),
            flags=tuple(flags),
        )

    @classmethod
    def read_csv(cls, path, races=RACES):
        return cls.from_frame(pd.read_csv(path, dtype={'location': str}), races)

    def write_csv(self, path):
        self.to_frame().to_csv(path, index=False, lineterminator='\n')

    def pre_only(self):
        """Pre-period groups as a static data set."""
        frame = self.to_frame()
        return ThresholdData.from_frame(frame[frame['period'] == 'pre'], self.races, self.flags)


def _sort_key(races):
    order = {r: i for i, r in enumerate(races)}

    def key(column):
        if column.name == 'race':
            return column.map(order)
        if column.name == 'period':
            return column.map({p: i for i, p in enumerate(PERIODS)})
        return column

    return key


def assign_period(frame, cutoff):
    """Label stops after ``cutoff`` (a date) as post, the rest as pre."""
    frame = frame.copy()
    frame['period'] = np.where(frame['stop_date'] > pd.Timestamp(cutoff), 'post', 'pre')
    return frame


def prepare(stops, min_stops=MIN_STOPS, max_locations=MAX_LOCATIONS, races=RACES):
    """
    Aggregate stop-level data into a ThresholdData count table.

    Args:
        stops: StopRecords, or a frame with ``race``, ``location``,
            ``search_conducted``, ``contraband_found`` and optionally
            ``period`` columns.
        min_stops (int): Locations with fewer total stops are dropped.
        max_locations (int): Keep at most this many locations, by stops.
        races: Races to keep.

    Raises:
        DegenerateHierarchyError: Fewer than two locations remain.
    """
    frame = stops if isinstance(stops, pd.DataFrame) else records_to_frame(stops)
    frame = frame[frame['race'].isin(races) & frame['location'].notna() & frame['search_conducted'].notna()]
    if 'period' not in frame.columns:
        frame = frame.assign(period='pre')
    frame = frame.assign(
        searched=frame['search_conducted'].astype(bool),
        hit=frame['search_conducted'].astype(bool) & frame['contraband_found'].fillna(False).astype(bool),
    )

    totals = frame.groupby('location').size()
    kept = totals[totals >= min_stops]
    dropped = len(totals) - len(kept)
    if len(kept) > max_locations:
        ranked = sorted(kept.items(), key=lambda item: (-item[1], str(item[0])))
        kept = dict(ranked[:max_locations])
        logger.info(f"Keeping the {max_locations} locations with most stops of {len(ranked)} qualifying")
    else:
        kept = dict(kept.items())
    if len(kept) < 2:
        raise DegenerateHierarchyError(
            f"{len(kept)} locations with at least {min_stops} stops; the hierarchy needs two or more"
        )
    if dropped:
        logger.info(f"Dropped {dropped} locations with fewer than {min_stops} stops")

    frame = frame[frame['location'].isin(list(kept))]
    counts = (
        frame.groupby(['race', 'location', 'period'], observed=True)
        .agg(stops=('searched', 'size'), searches=('searched', 'sum'), hits=('hit', 'sum'))
        .reset_index()
    )
    flags = []
    sparse = counts['searches'] < SPARSE_SEARCHES
    for race in races[1:]:
        share = sparse[counts['race'] == race].mean() if (counts['race'] == race).any() else 1.0
        if share > SPARSE_SHARE:
            message = (
                f"{race} drivers have fewer than {SPARSE_SEARCHES} searches in {share:.0%} of locations; "
                "their thresholds rest mostly on the prior"
            )
            logger.warning(message)
            warnings.warn(message, SparsityWarning, stacklevel=2)
            flags.append(f"sparse:{race}")
    data = ThresholdData.from_frame(counts, races, flags)
    logger.info(
        f"Prepared threshold data: {data.n_groups} groups, {len(data.locations)} locations, "
        f"{int(data.stops.sum())} stops"
    )
    return data
