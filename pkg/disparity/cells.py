"""
Stop counts per (race, age bin, gender, location, year) with their
population benchmark.
"""

import logging
from dataclasses import asdict, dataclass, field

import pandas as pd

from records.pipeline import records_to_frame

logger = logging.getLogger(__name__)

CELL_KEY = ('state', 'location', 'race', 'age_bin', 'gender', 'year')


@dataclass(frozen=True)
class CountCell:
    state: str
    location: str
    race: str
    age_bin: str
    gender: str
    year: int
    stops: int
    benchmark_pop: float


@dataclass
class CoverageReport:
    """Where every analysis-set stop went."""

    analysis_records: int = 0
    in_cells: int = 0
    incomplete_key: int = 0
    no_census: int = 0
    zero_population: int = 0
    missing_locations: list = field(default_factory=list)

    @property
    def excluded(self):
        return self.incomplete_key + self.no_census + self.zero_population

    @property
    def conserved(self):
        return self.in_cells + self.excluded == self.analysis_records

    def to_dict(self):
        payload = asdict(self)
        payload.update(excluded=self.excluded, conserved=self.conserved)
        return payload


def build_cells(records, census):
    """
    Aggregate stops into count cells against the population table.

    Stops missing any key field are counted as ``incomplete_key``; stops whose
    stratum has no population row as ``no_census`` (their locations are
    listed); stops in strata with zero population as ``zero_population``.
    Strata with population but no stops become zero cells, restricted to
    locations and years that appear in the stops.

    Returns:
        tuple: (list of CountCell, CoverageReport)
    """
    frame = records if isinstance(records, pd.DataFrame) else records_to_frame(records)
    coverage = CoverageReport(analysis_records=len(frame))

    complete = frame[list(CELL_KEY)].notna().all(axis=1)
    coverage.incomplete_key = int((~complete).sum())
    stops = frame.loc[complete, list(CELL_KEY)].copy()
    stops['year'] = stops['year'].astype(int)
    counts = stops.groupby(list(CELL_KEY), observed=True).size().rename('stops').reset_index()

    present = counts[['state', 'location']].drop_duplicates()
    years = counts[['state', 'year']].drop_duplicates()
    benchmark = census.merge(present, on=['state', 'location']).merge(years, on=['state', 'year'])
    merged = benchmark.merge(counts, on=list(CELL_KEY), how='outer', indicator=True)

    orphan = merged['_merge'] == 'right_only'
    coverage.no_census = int(merged.loc[orphan, 'stops'].sum())
    coverage.missing_locations = sorted(set(merged.loc[orphan, 'state'] + '|' + merged.loc[orphan, 'location']))
    merged = merged[~orphan].copy()
    merged['stops'] = merged['stops'].fillna(0).astype(int)
    empty = merged['population'] <= 0
    coverage.zero_population = int(merged.loc[empty, 'stops'].sum())
    merged = merged[~empty].sort_values(list(CELL_KEY)).reset_index(drop=True)
    coverage.in_cells = int(merged['stops'].sum())

    cells = [
        CountCell(row.state, row.location, row.race, row.age_bin, row.gender, int(row.year),
                  int(row.stops), float(row.population))
        for row in merged.itertuples(index=False)
    ]
    if coverage.no_census:
        logger.warning(
            f"{coverage.no_census} stops have no population stratum "
            f"({len(coverage.missing_locations)} locations affected)"
        )
    logger.info(
        f"Built {len(cells)} cells holding {coverage.in_cells} of {coverage.analysis_records} stops "
        f"({coverage.incomplete_key} incomplete keys)"
    )
    return cells, coverage


def cells_to_frame(cells):
    return pd.DataFrame([asdict(c) for c in cells], columns=[*CELL_KEY, 'stops', 'benchmark_pop'])
