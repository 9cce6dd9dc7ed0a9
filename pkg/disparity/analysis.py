"""
Stop-rate, post-stop and outcome-test analyses.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from glm.design import Design, Factor
from glm.exceptions import GLMError
from glm.fitting import fit_count, fit_logistic, predict_rate, sandwich_errors
from numerics.exceptions import NumericsError
from records.pipeline import AVAILABILITY_CUTOFF, availability_report, records_to_frame
from records.types import Outcome, SearchType

from .cells import cells_to_frame
from .exceptions import DisparityError, NoEligibleStatesError

logger = logging.getLogger(__name__)

RACES = ('White', 'Black', 'Hispanic')
POSTSTOP_OUTCOMES = ('citation_given_speeding', 'search', 'consent_search', 'arrest')
STOP_FAMILIES = ('negbin', 'poisson', 'quasipoisson')
CONSENT_STATES = ('CO', 'FL', 'MA', 'MD', 'NC', 'TX', 'WA')

# control spec -> control groups; every spec also carries race
CONTROL_SPECS = {
    'race': (),
    'race, location': ('location',),
    'race, location, time': ('location', 'time'),
    'race, location, demo': ('location', 'demo'),
    'race, location, time, demo': ('location', 'time', 'demo'),
}
STOP_COVARIATES = 'race, location, demo, year'

OUTCOME_FIELDS = {
    'citation_given_speeding': ('driver_race', 'stop_reason', 'outcome'),
    'search': ('driver_race', 'search_conducted'),
    'consent_search': ('driver_race', 'search_conducted', 'search_types'),
    'arrest': ('driver_race', 'outcome'),
}
CONTROL_FIELDS = {
    'location': ('location',),
    'time': ('stop_date', 'stop_time'),
    'demo': ('driver_age', 'driver_gender'),
}
CONTROL_FACTORS = {
    'location': (Factor('location_key'),),
    'time': (Factor('year'), Factor('stop_quarter'), Factor('weekday'), Factor('hour_bin')),
    'demo': (Factor('age_bin', '16-19'), Factor('gender', 'Female')),
}
WARNING_OUTCOMES = (Outcome.WRITTEN_WARNING.value, Outcome.VERBAL_WARNING.value, Outcome.NONE.value)
DEMOGRAPHIC_FACTORS = ('race', 'age_bin', 'gender')


def as_frame(records):
    return records if isinstance(records, pd.DataFrame) else records_to_frame(records)


def eligible_states(report, required, states=None):
    """
    Split states by field availability.

    Returns:
        tuple: (kept states, {dropped state: [missing fields]})
    """
    kept, dropped = [], {}
    for state, row in sorted(report.items()):
        if states is not None and state not in states:
            continue
        missing = [f for f in required if not row[f]['available']]
        if missing:
            dropped[state] = missing
        else:
            kept.append(state)
    return kept, dropped


def _profile_weights(frame, factors, weight=None):
    """Share of stops at each level of every non-demographic factor."""
    weights = {}
    for factor in factors:
        if factor.name in DEMOGRAPHIC_FACTORS:
            continue
        column = frame[factor.name].astype(str)
        totals = frame[weight].groupby(column).sum() if weight else column.value_counts()
        weights[factor.name] = {str(level): float(value) for level, value in totals.sort_index().items()}
    return weights


def stop_rate_analysis(cells, family='negbin'):
    """
    Count regression of stops on race, age bin, gender, location and year
    with a log population offset.

    Poisson fits carry sandwich standard errors; quasi-Poisson fits their
    Pearson-scaled covariance.
    """
    frame = cells if isinstance(cells, pd.DataFrame) else cells_to_frame(cells)
    if frame.empty:
        raise DisparityError("no count cells to fit")
    frame = frame.assign(location_key=frame['state'] + '|' + frame['location'], year=frame['year'].astype(str))
    factors = (Factor('race', 'White'), Factor('age_bin', '16-19'), Factor('gender', 'Female'),
               Factor('location_key'), Factor('year'))
    design = Design.from_frame(frame, 'stops', factors=factors, exposure='benchmark_pop')
    design.metadata.update({
        'analysis': 'stop_rate',
        'covariates': STOP_COVARIATES,
        'states': sorted(frame['state'].unique()),
        'cells': len(frame),
        'stops': int(frame['stops'].sum()),
        'profile_weights': _profile_weights(frame, factors, weight='stops'),
        'marginalization': 'stop-weighted average over location and year',
    })
    result = fit_count(design, family)
    if result.family == 'poisson' and family == 'poisson':
        result = sandwich_errors(result, design)
    return result


def _response(frame, outcome, exclude_incident_to_arrest):
    if outcome == 'citation_given_speeding':
        speeding = frame['violations'].map(lambda v: 'speeding' in v) | (frame['stop_purpose'] == 'speeding')
        frame = frame[speeding & frame['outcome'].isin((Outcome.CITATION.value, *WARNING_OUTCOMES))]
        return frame, (frame['outcome'] == Outcome.CITATION.value).astype(float)
    if outcome == 'arrest':
        frame = frame[frame['outcome'] != Outcome.UNKNOWN.value]
        return frame, (frame['outcome'] == Outcome.ARREST.value).astype(float)

    frame = frame[frame['search_conducted'].notna()]
    if exclude_incident_to_arrest:
        incident = frame['search_types'].map(lambda types: SearchType.INCIDENT_TO_ARREST.value in types)
        frame = frame[~incident]
    searched = frame['search_conducted'].astype(bool)
    if outcome == 'search':
        return frame, searched.astype(float)
    consent = frame['search_types'].map(lambda types: SearchType.CONSENT.value in types)
    return frame, (searched & consent).astype(float)


def poststop_analysis(records, outcome, controls='race, location, time, demo', report=None,
                      states=None, exclude_incident_to_arrest=False, cutoff=AVAILABILITY_CUTOFF):
    """
    Logistic regression of a post-stop outcome on race plus a control spec.

    Args:
        records: Analysis-set StopRecords.
        outcome (str): One of ``POSTSTOP_OUTCOMES``.
        controls (str): Key of ``CONTROL_SPECS``.
        report (dict): Availability report; computed from ``records`` if omitted.
        states: Optional state subset. Consent searches are always limited
            to ``CONSENT_STATES``.
        exclude_incident_to_arrest (bool): Drop stops whose searches were
            incident to arrest (robustness variant for search outcomes).

    Returns:
        FitResult: ``metadata`` lists states used and dropped (with the
        missing fields), row counts and the profile weights.

    Raises:
        NoEligibleStatesError: No state carries the required fields.
    """
    if outcome not in POSTSTOP_OUTCOMES:
        raise DisparityError(f"unknown outcome {outcome!r}; expected one of {POSTSTOP_OUTCOMES}")
    if controls not in CONTROL_SPECS:
        raise DisparityError(f"unknown control spec {controls!r}")
    groups = CONTROL_SPECS[controls]
    required = list(OUTCOME_FIELDS[outcome]) + [f for g in groups for f in CONTROL_FIELDS[g]]
    if report is None:
        report = availability_report(records, cutoff)
    if outcome == 'consent_search':
        states = [s for s in (states or CONSENT_STATES) if s in CONSENT_STATES]
    kept, dropped = eligible_states(report, required, states)
    label = f"{outcome} ~ {controls}"
    for state, missing in dropped.items():
        logger.warning(f"{label}: dropping {state}, missing {missing}")
    if not kept:
        raise NoEligibleStatesError(label, dropped)

    frame = as_frame(records)
    frame = frame[frame['state'].isin(kept) & frame['race'].isin(RACES)]
    frame = frame.assign(
        location_key=(frame['state'] + '|' + frame['location']).where(frame['location'].notna()),
        year=frame['year'].astype('string'),
        stop_quarter=frame['quarter'].str[-2:],
    )
    frame, response = _response(frame, outcome, exclude_incident_to_arrest)
    frame = frame.assign(response=response)

    factors = (Factor('race', 'White'),) + tuple(f for g in groups for f in CONTROL_FACTORS[g])
    columns = [f.name for f in factors]
    complete = frame[columns].notna().all(axis=1)
    rows_dropped = int((~complete).sum())
    frame = frame[complete]
    if frame.empty:
        raise DisparityError(f"{label}: no complete rows")

    design = Design.from_frame(frame, 'response', factors=factors, aggregate=True)
    design.metadata.update({
        'analysis': 'poststop',
        'outcome': outcome,
        'covariates': controls,
        'states': kept,
        'dropped_states': dropped,
        'rows': len(frame),
        'rows_incomplete': rows_dropped,
        'exclude_incident_to_arrest': exclude_incident_to_arrest,
        'profile_weights': _profile_weights(frame, factors),
        'marginalization': 'stop-weighted average over non-demographic factors',
    })
    result = fit_logistic(design)
    logger.info(f"{label}: {len(frame)} stops in {kept}; Black {_coef(result, 'Black'):.3f}, "
                f"Hispanic {_coef(result, 'Hispanic'):.3f}")
    return result


def _coef(fit, race):
    try:
        return fit.coef(f"race[{race}]")
    except GLMError:
        return float('nan')


def typical_rates(fit, races=RACES, age_bin='20-29', gender='Male'):
    """
    Model rate for a typical driver of each race: the given age bin and
    gender, every other factor averaged with the stop weights stored in the
    fit's metadata.
    """
    weights = fit.metadata.get('profile_weights', {})
    rates = {}
    for race in races:
        profile = {}
        for factor in fit.spec.factors:
            if factor.name == 'race':
                profile['race'] = race
            elif factor.name == 'age_bin':
                profile['age_bin'] = age_bin
            elif factor.name == 'gender':
                profile['gender'] = gender
            else:
                profile[factor.name] = {k: v for k, v in weights[factor.name].items() if k in factor.levels}
        rates[race] = predict_rate(fit, profile)
    return rates


@dataclass
class BatteryEntry:
    outcome: str
    covariates: str
    family: str = 'binomial'
    fit: object = None
    skipped: str = None
    exclude_incident_to_arrest: bool = False

    def row(self):
        payload = {
            'outcome': self.outcome,
            'covariates': self.covariates,
            'family': self.family,
            'exclude_incident_to_arrest': self.exclude_incident_to_arrest,
            'skipped': self.skipped,
        }
        for race in RACES[1:]:
            ok = self.fit is not None and f"race[{race}]" in self.fit.names
            payload[race] = self.fit.coef(f"race[{race}]") if ok else None
            payload[f"{race}_se"] = self.fit.std_error(f"race[{race}]") if ok else None
        payload['states'] = ','.join(self.fit.metadata.get('states', [])) if self.fit is not None else ''
        return payload


def analysis_battery(records, cells=None, outcomes=POSTSTOP_OUTCOMES, specs=tuple(CONTROL_SPECS),
                     families=STOP_FAMILIES, report=None, robustness=True):
    """
    Every outcome x control-spec regression, skipping (with a reason) any
    combination no state supports or the fitter rejects.

    Returns:
        list: BatteryEntry per combination, stop-rate families first.
    """
    entries = []
    if cells is not None:
        for family in families:
            entry = BatteryEntry('stop', STOP_COVARIATES, family)
            try:
                entry.fit = stop_rate_analysis(cells, family)
            except (DisparityError, GLMError, NumericsError) as exc:
                entry.skipped = str(exc)
                logger.warning(f"Skipping stop-rate {family}: {exc}")
            entries.append(entry)

    if report is None:
        report = availability_report(records)
    variants = [False, True] if robustness else [False]
    for outcome in outcomes:
        for controls in specs:
            for exclude in variants:
                if exclude and outcome not in ('search', 'consent_search'):
                    continue
                entry = BatteryEntry(outcome, controls, exclude_incident_to_arrest=exclude)
                try:
                    entry.fit = poststop_analysis(records, outcome, controls, report=report,
                                                  exclude_incident_to_arrest=exclude)
                except (DisparityError, GLMError, NumericsError) as exc:
                    entry.skipped = str(exc)
                    logger.warning(f"Skipping {outcome} ~ {controls}: {exc}")
                entries.append(entry)
    return entries


def typical_driver_table(entries, age_bin='20-29', gender='Male'):
    """Typical-driver rates per outcome from the fully controlled fit of each."""
    full = {'stop': STOP_COVARIATES, **{o: 'race, location, time, demo' for o in POSTSTOP_OUTCOMES}}
    rows = []
    for entry in entries:
        if entry.fit is None or entry.exclude_incident_to_arrest or full.get(entry.outcome) != entry.covariates:
            continue
        if entry.outcome == 'stop' and entry.family != 'negbin':
            continue
        rows.append({'outcome': entry.outcome, **typical_rates(entry.fit, age_bin=age_bin, gender=gender)})
    return rows


@dataclass(frozen=True)
class HitRateRow:
    state: str
    location: str
    race: str
    searches: int
    hits: int

    def __post_init__(self):
        if not 0 <= self.hits <= self.searches:
            raise DisparityError(f"hits {self.hits} outside [0, searches={self.searches}]")

    @property
    def hit_rate(self):
        return self.hits / self.searches if self.searches else None

    @property
    def undefined(self):
        return self.searches == 0

    def to_dict(self):
        return {
            'state': self.state, 'location': self.location, 'race': self.race,
            'searches': self.searches, 'hits': self.hits,
            'hit_rate': self.hit_rate, 'undefined': self.undefined,
        }


@dataclass
class OutcomeTestResult:
    rows: list
    aggregate: dict
    states: list = field(default_factory=list)
    aggregate_only_states: list = field(default_factory=list)

    def aggregate_rate(self, race):
        searches, hits = self.aggregate[race]
        return hits / searches if searches else None


def outcome_test(records, location_states=None, report=None, races=RACES):
    """
    Hit rates by race and location, plus aggregates by race.

    States carrying search and contraband data enter the aggregates. Only
    states that also carry location (and, when given, are in
    ``location_states``) contribute per-location rows; every race is listed
    at every such location, with an undefined rate when it had no searches.
    """
    if report is None:
        report = availability_report(records)
    kept, dropped = eligible_states(report, ('driver_race', 'search_conducted', 'contraband_found'))
    if not kept:
        raise NoEligibleStatesError('outcome_test', dropped)
    located = [s for s in kept if report[s]['location']['available']
               and (location_states is None or s in location_states)]

    frame = as_frame(records)
    frame = frame[frame['state'].isin(kept) & frame['race'].isin(races)]
    searched = frame[frame['search_conducted'].fillna(False).astype(bool) & frame['contraband_found'].notna()]
    searched = searched.assign(hit=searched['contraband_found'].astype(bool))

    aggregate = {}
    for race in races:
        part = searched[searched['race'] == race]
        aggregate[race] = (len(part), int(part['hit'].sum()))

    local = searched[searched['state'].isin(located) & searched['location'].notna()]
    counts = local.groupby(['state', 'location', 'race']).agg(searches=('hit', 'size'), hits=('hit', 'sum'))
    places = frame[frame['state'].isin(located) & frame['location'].notna()][['state', 'location']]
    rows = []
    for state, location in sorted(set(map(tuple, places.drop_duplicates().to_numpy()))):
        for race in races:
            key = (state, location, race)
            searches, hits = (int(v) for v in counts.loc[key]) if key in counts.index else (0, 0)
            rows.append(HitRateRow(state, location, race, searches, hits))

    result = OutcomeTestResult(rows, aggregate, kept, [s for s in kept if s not in located])
    summary = ', '.join(
        f"{race} {result.aggregate_rate(race):.1%}" for race in races if result.aggregate_rate(race) is not None
    )
    logger.info(f"Outcome test over {len(kept)} states ({len(rows)} location rows): {summary}")
    return result


@dataclass(frozen=True)
class DriverType:
    share: float
    probability: float


def two_type_hit_rates(types, threshold):
    """
    Search and hit rate when officers search every driver whose probability
    of carrying contraband is at least ``threshold``.

    Args:
        types: DriverType (or ``(share, probability)``) pairs for one race.

    Returns:
        tuple: (search rate, hit rate); hit rate is None with no searches.
    """
    types = [t if isinstance(t, DriverType) else DriverType(*t) for t in types]
    if not np.isclose(sum(t.share for t in types), 1.0):
        raise DisparityError("driver type shares must sum to 1")
    searched = [t for t in types if t.probability >= threshold]
    search_rate = sum(t.share for t in searched)
    if not search_rate:
        return 0.0, None
    return search_rate, sum(t.share * t.probability for t in searched) / search_rate


def aggregate_rates(records, report=None, races=RACES):
    """Raw search and arrest proportions by race over states carrying each field."""
    if report is None:
        report = availability_report(records)
    frame = as_frame(records)
    frame = frame[frame['race'].isin(races)]
    rows = []
    for name, fields, event in (
        ('search', ('search_conducted',), lambda f: f['search_conducted'].fillna(False).astype(bool)),
        ('arrest', ('outcome',), lambda f: f['outcome'] == Outcome.ARREST.value),
    ):
        kept, _ = eligible_states(report, ('driver_race', *fields))
        part = frame[frame['state'].isin(kept)]
        if name == 'search':
            part = part[part['search_conducted'].notna()]
        else:
            part = part[part['outcome'] != Outcome.UNKNOWN.value]
        hits = event(part)
        for race in races:
            mask = part['race'] == race
            stops = int(mask.sum())
            events = int(hits[mask].sum())
            rows.append({'rate': name, 'race': race, 'stops': stops, 'events': events,
                         'proportion': events / stops if stops else None, 'states': ','.join(kept)})
    return rows
