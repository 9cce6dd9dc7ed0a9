"""
Rates over time around legalization, with separate linear trends fitted
before and after the legalization date, plus the supporting counts.
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from disparity.analysis import as_frame, eligible_states
from records.pipeline import availability_report
from threshold.data import assign_period, prepare

from .did import DidSpec, outcome_frame, years_since
from .exceptions import PolicyError

logger = logging.getLogger(__name__)

WINDOWS = {'quarter': 'Q', 'month': 'M'}
MIN_TREND_POINTS = 3
ALL_RACES = 'All'

SERIES_COLUMNS = ('state', 'race', 'period', 'side', 'years', 'stops', 'events', 'rate')
TREND_COLUMNS = ('state', 'race', 'side', 'points', 'slope', 'slope_se', 'intercept', 'intercept_se')


@dataclass
class TrendResult:
    """Per-window rates and the pre/post OLS line through each series.

    Intercepts are the fitted rate at the legalization date, since ``years``
    is measured from it.
    """

    series: pd.DataFrame
    trends: pd.DataFrame
    outcome: str
    window: str

    def shifts(self):
        """Post minus pre intercept per (state, race), with its standard error."""
        rows = []
        for (state, race), group in self.trends.groupby(['state', 'race']):
            sides = group.set_index('side')
            if not {'pre', 'post'} <= set(sides.index):
                continue
            pre, post = sides.loc['pre'], sides.loc['post']
            rows.append({
                'state': state, 'race': race,
                'shift': float(post['intercept'] - pre['intercept']),
                'shift_se': float(np.hypot(post['intercept_se'], pre['intercept_se'])),
            })
        return pd.DataFrame(rows, columns=['state', 'race', 'shift', 'shift_se'])


def _line(points):
    fit = stats.linregress(points['years'].to_numpy(dtype=float), points['rate'].to_numpy(dtype=float))
    return {
        'points': len(points),
        'slope': float(fit.slope),
        'slope_se': float(fit.stderr),
        'intercept': float(fit.intercept),
        'intercept_se': float(fit.intercept_stderr),
    }


def trend_series(records, outcome='search', spec=None, window='quarter', states=None, pool_races=False,
                 report=None):
    """
    Outcome rates per (state, race, window) and fitted pre/post trends.

    Args:
        records: Analysis-set StopRecords (or their frame, with ``report``).
        outcome (str): ``search`` (procedural searches excluded) or
            ``drug_misdemeanor``.
        spec (DidSpec): Supplies the legalization date, the treated states
            and the procedural search types.
        window (str): ``quarter`` or ``month``.
        states: States to report; ``spec.treated_states`` by default.
        pool_races (bool): One series per state over all races.

    Returns:
        TrendResult
    """
    if window not in WINDOWS:
        raise PolicyError(f"unknown window {window!r}; expected one of {tuple(WINDOWS)}")
    base = spec or DidSpec.from_settings()
    spec = DidSpec(
        treated_states=tuple(states or base.treated_states),
        control_states=(),
        legalization_date=base.legalization_date,
        outcome=outcome,
        excluded_search_types=base.excluded_search_types,
    )
    frame, _ = outcome_frame(records, spec, report)
    if pool_races:
        frame = frame.assign(race=ALL_RACES)

    periods = frame['stop_date'].dt.to_period(WINDOWS[window])
    series = (
        frame.assign(period=periods.astype(str))
        .groupby(['state', 'race', 'period'])
        .agg(stops=('response', 'size'), events=('response', 'sum'))
        .reset_index()
    )
    if series.empty:
        raise PolicyError(f"no {outcome} records for {list(spec.treated_states)}")
    spans = pd.PeriodIndex(series['period'], freq=WINDOWS[window])
    midpoints = spans.start_time + (spans.end_time - spans.start_time) / 2
    series['years'] = years_since(pd.Series(midpoints, index=series.index), spec.legalization_date)
    series['side'] = np.where(series['years'] > 0, 'post', 'pre')
    series['events'] = series['events'].astype(int)
    series['rate'] = series['events'] / series['stops']
    series = series[list(SERIES_COLUMNS)]

    trends = []
    for (state, race, side), points in series.groupby(['state', 'race', 'side']):
        if len(points) < MIN_TREND_POINTS:
            logger.info(f"{state} {race} {side}: {len(points)} windows, too few for a trend line")
            continue
        trends.append({'state': state, 'race': race, 'side': side, **_line(points)})
    result = TrendResult(series.reset_index(drop=True), pd.DataFrame(trends, columns=list(TREND_COLUMNS)),
                         outcome, window)
    logger.info(f"{outcome} series: {len(series)} {window} rates, {len(trends)} trend lines")
    return result


def control_panel(records, spec=None, window='quarter', report=None):
    """Pooled-race rate series for every control state, for comparing against the treated states."""
    spec = spec or DidSpec.from_settings()
    if report is None:
        report = availability_report(records)
    frame = as_frame(records)
    controls = spec.control_states
    if controls is None:
        controls = [s for s in sorted(frame['state'].unique()) if s not in spec.treated_states]
    if not controls:
        raise PolicyError("no control states in the data")
    return trend_series(frame, spec.outcome, spec, window, states=controls, pool_races=True, report=report)


def innocent_search_delta(records, spec=None, report=None):
    """
    Relative change in searches that found no contraband, treated states,
    from the year before legalization to the year after.

    Returns:
        float: ``(post - pre) / pre``; -0.5 means half as many.

    Raises:
        PolicyError: A treated state lacks contraband data, or either year
            has no such searches.
    """
    spec = spec or DidSpec.from_settings()
    if report is None:
        report = availability_report(records)
    states = [s for s in spec.treated_states if s in report]
    kept, dropped = eligible_states(report, ('search_conducted', 'contraband_found', 'stop_date'), states)
    if dropped or not kept:
        raise PolicyError(f"contraband data missing for treated states: {sorted(dropped) or list(spec.treated_states)}")

    frame = as_frame(records)
    frame = frame[frame['state'].isin(kept) & frame['stop_date'].notna()]
    excluded = set(spec.excluded_search_types)
    searched = frame['search_conducted'].fillna(False).astype(bool)
    procedural = frame['search_types'].map(lambda types: bool(excluded.intersection(types)))
    found_nothing = ~frame['contraband_found'].fillna(True).astype(bool)
    innocent = frame[searched & ~procedural & found_nothing]

    cutoff = pd.Timestamp(spec.legalization_date)
    year = pd.DateOffset(years=1)
    pre = int(((innocent['stop_date'] > cutoff - year) & (innocent['stop_date'] <= cutoff)).sum())
    post = int(((innocent['stop_date'] > cutoff) & (innocent['stop_date'] <= cutoff + year)).sum())
    if not pre or not post:
        raise PolicyError(f"need innocent searches in both years around {spec.legalization_date} (pre {pre}, post {post})")
    delta = (post - pre) / pre
    logger.info(f"Searches finding nothing in {kept}: {pre} -> {post} ({delta:+.1%})")
    return delta


def legalization_threshold_data(records, state, spec=None, min_stops=None, max_locations=None):
    """
    Pre/post count table for the time-varying threshold model of one
    treated state; procedural searches are dropped as in the search model.
    """
    spec = spec or DidSpec.from_settings()
    frame = as_frame(records)
    frame = frame[(frame['state'] == state) & frame['stop_date'].notna()]
    if frame.empty:
        raise PolicyError(f"no stops for {state}")
    excluded = set(spec.excluded_search_types)
    frame = frame[~frame['search_types'].map(lambda types: bool(excluded.intersection(types)))]
    frame = assign_period(frame, spec.legalization_date)
    kwargs = {k: v for k, v in (('min_stops', min_stops), ('max_locations', max_locations)) if v is not None}
    return prepare(frame, **kwargs)
