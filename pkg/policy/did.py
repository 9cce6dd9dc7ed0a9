"""
Difference-in-difference search model around recreational marijuana
legalization.

The model is a logistic regression with state and race fixed effects, a
linear time trend ``t`` in years since legalization, and one treatment
effect per race: ``race[r]:Z`` where ``Z`` is 1 for stops in a treated state
after the legalization date.
"""

import logging
from dataclasses import asdict, dataclass
from datetime import date

import pandas as pd
from django.conf import settings

from disparity.analysis import RACES, as_frame, eligible_states
from glm.design import Design, Factor, Interaction
from glm.exceptions import GLMError
from glm.fitting import fit_logistic
from records.pipeline import availability_report

from .exceptions import EmptyCellError, PolicyError

logger = logging.getLogger(__name__)

OUTCOMES = ('search', 'drug_misdemeanor')
TREATED_STATES = ('CO', 'WA')
LEGALIZATION_DATE = date(2012, 12, 31)
PROCEDURAL_SEARCH_TYPES = ('IncidentToArrest', 'Inventory', 'Warrant')
DRUG_CODES = ('drug/possession', 'drug/marijuana-possession')
# states whose records separate marijuana possession from other drug charges
MISDEMEANOR_CODES = {'CO': ('drug/marijuana-possession',)}
DAYS_PER_YEAR = 365.25

OUTCOME_FIELDS = {
    'search': ('driver_race', 'stop_date', 'search_conducted'),
    'drug_misdemeanor': ('driver_race', 'stop_date', 'stop_reason'),
}


@dataclass(frozen=True)
class DidSpec:
    """
    Treated and control states around one legalization date.

    ``control_states`` of None means every non-treated state in the data
    that records the outcome.
    """

    treated_states: tuple = TREATED_STATES
    control_states: tuple = None
    legalization_date: date = LEGALIZATION_DATE
    outcome: str = 'search'
    excluded_search_types: tuple = PROCEDURAL_SEARCH_TYPES

    def __post_init__(self):
        if self.outcome not in OUTCOMES:
            raise PolicyError(f"unknown outcome {self.outcome!r}; expected one of {OUTCOMES}")
        if not self.treated_states:
            raise PolicyError("no treated states")
        overlap = set(self.treated_states) & set(self.control_states or ())
        if overlap:
            raise PolicyError(f"states both treated and control: {sorted(overlap)}")

    @classmethod
    def from_settings(cls, **overrides):
        conf = getattr(settings, 'TRAFFIC_STOPS', {})
        values = {
            'treated_states': tuple(conf.get('TREATED_STATES', TREATED_STATES)),
            'legalization_date': date.fromisoformat(str(conf.get('LEGALIZATION_DATE', LEGALIZATION_DATE))),
            'excluded_search_types': tuple(conf.get('PROCEDURAL_SEARCH_TYPES', PROCEDURAL_SEARCH_TYPES)),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        if isinstance(values['legalization_date'], str):
            values['legalization_date'] = date.fromisoformat(values['legalization_date'])
        return cls(**values)

    def to_dict(self):
        payload = asdict(self)
        payload['legalization_date'] = self.legalization_date.isoformat()
        return payload


def years_since(stop_dates, cutoff):
    """Continuous time in years relative to ``cutoff`` (negative before it)."""
    return (pd.to_datetime(stop_dates) - pd.Timestamp(cutoff)).dt.days / DAYS_PER_YEAR


def drug_misdemeanor(frame):
    """Per-stop drug misdemeanor indicator, using each state's charge coding."""
    def charged(row):
        codes = MISDEMEANOR_CODES.get(row.state, DRUG_CODES)
        return any(code in codes for code in row.violations)

    return pd.Series([charged(row) for row in frame.itertuples(index=False)], index=frame.index, dtype=bool)


def outcome_frame(records, spec, report=None):
    """
    Stops entering the legalization analyses, one row each.

    Searches that are procedural (any search type in
    ``spec.excluded_search_types``) are removed for the search outcome.

    Returns:
        tuple: (frame with ``treated``, ``post``, ``t``, ``Z`` and
        ``response`` columns, {dropped state: missing fields})
    """
    if report is None:
        report = availability_report(records)
    frame = as_frame(records)
    present = sorted(frame['state'].unique())
    controls = spec.control_states
    if controls is None:
        controls = [s for s in present if s not in spec.treated_states]
    states = [s for s in (*spec.treated_states, *controls) if s in report]
    kept, dropped = eligible_states(report, OUTCOME_FIELDS[spec.outcome], states)
    for state, missing in dropped.items():
        logger.warning(f"Legalization {spec.outcome}: dropping {state}, missing {missing}")

    frame = frame[frame['state'].isin(kept) & frame['race'].isin(RACES) & frame['stop_date'].notna()]
    if spec.outcome == 'search':
        frame = frame[frame['search_conducted'].notna()]
        excluded = set(spec.excluded_search_types)
        procedural = frame['search_types'].map(lambda types: bool(excluded.intersection(types)))
        if procedural.any():
            logger.info(f"Excluding {int(procedural.sum())} procedural searches")
        frame = frame[~procedural]
        response = frame['search_conducted'].astype(bool)
    else:
        response = drug_misdemeanor(frame)

    treated = frame['state'].isin(spec.treated_states)
    post = frame['stop_date'] > pd.Timestamp(spec.legalization_date)
    frame = frame.assign(
        treated=treated,
        post=post,
        t=years_since(frame['stop_date'], spec.legalization_date),
        Z=(treated & post).astype(float),
        response=response.astype(float),
    )
    return frame, dropped


def _check_cells(frame, spec):
    missing = []
    for label, arm in (('treated', frame['treated']), ('control', ~frame['treated'])):
        for side, when in (('pre', ~frame['post']), ('post', frame['post'])):
            if not (arm & when).any():
                missing.append(f"{label}/{side}")
    if missing:
        raise EmptyCellError(missing)
    exposed = frame[frame['Z'] > 0]
    absent = [race for race in frame['race'].unique() if not (exposed['race'] == race).any()]
    if absent:
        raise PolicyError(
            f"no treated stops after {spec.legalization_date} for {sorted(absent)}; "
            "their treatment effects are not identified"
        )


def did_fit(records, spec=None, report=None):
    """
    Fit the legalization difference-in-difference model.

    Args:
        records: Analysis-set StopRecords (or their frame).
        spec (DidSpec): Defaults from settings.
        report (dict): Availability report; computed if omitted.

    Returns:
        FitResult: Treatment effects are ``race[White]:Z`` etc.; metadata
        lists treated and control states, dropped states and row counts.

    Raises:
        EmptyCellError: A treated/control x pre/post cell is empty, which is
            also what a legalization date outside the data window produces.
    """
    spec = spec or DidSpec.from_settings()
    frame, dropped = outcome_frame(records, spec, report)
    if frame.empty:
        raise EmptyCellError(['all cells'])
    _check_cells(frame, spec)

    design = Design.from_frame(
        frame, 'response',
        factors=(Factor('state'), Factor('race', 'White')),
        numeric=('t',),
        interactions=(Interaction('race', 'Z'),),
        aggregate=True,
    )
    treated = sorted(frame.loc[frame['treated'], 'state'].unique())
    control = sorted(frame.loc[~frame['treated'], 'state'].unique())
    design.metadata.update({
        'analysis': 'did',
        'spec': spec.to_dict(),
        'treated_states': treated,
        'control_states': control,
        'dropped_states': dropped,
        'rows': len(frame),
        'events': int(frame['response'].sum()),
    })
    result = fit_logistic(design)
    effects = ', '.join(f"{race} {coef:.3f} ({se:.3f})" for race, (coef, se) in treatment_effects(result).items())
    logger.info(f"Legalization {spec.outcome} model on {len(frame)} stops: {effects}")
    return result


def treatment_effects(fit):
    """{race: (estimate, standard error)} of the race-specific treatment effects."""
    effects = {}
    for race in RACES:
        name = f"race[{race}]:Z"
        if name in fit.names:
            effects[race] = (fit.coef(name), fit.std_error(name))
    return effects


def did_table(fit):
    """Coefficient block: treatment effect per race, then time and race main effects."""
    rows = [
        {'term': f"legalization:{race}", 'estimate': coef, 'std_error': se}
        for race, (coef, se) in treatment_effects(fit).items()
    ]
    for name, term in (('t', 'time_years'), *((f"race[{r}]", r) for r in RACES[1:])):
        try:
            rows.append({'term': term, 'estimate': fit.coef(name), 'std_error': fit.std_error(name)})
        except GLMError:
            continue
    return rows


def did_summary(fit):
    return {
        'coefficients': did_table(fit),
        'converged': fit.converged,
        'flags': list(fit.flags),
        'metadata': fit.metadata,
    }
