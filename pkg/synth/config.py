"""
Ground truth for the synthetic generators.

Every generator reads one ``SynthConfig``; the same config and seed always
produce the same data.
"""

from dataclasses import asdict, dataclass, field, replace
from datetime import date

from .exceptions import SynthError

RACES = ('White', 'Black', 'Hispanic')
AGE_BINS = ('16-19', '20-29', '30-39', '40-49', '50+')
GENDERS = ('Female', 'Male')


def _stop_rate_effects():
    return {
        'race[Black]': 0.37, 'race[Hispanic]': -0.40, 'gender[Male]': 0.65,
        'age_bin[20-29]': 0.10, 'age_bin[30-39]': -0.25, 'age_bin[40-49]': -0.45, 'age_bin[50+]': -0.90,
    }


def _search_effects():
    return {'race[Black]': 0.79, 'race[Hispanic]': 0.64}


@dataclass(frozen=True)
class SynthConfig:
    """
    Grid sizes and true parameters.

    Threshold truth is given per race on the natural scale
    (``threshold_phi``, ``threshold_lam``, ``threshold_t``); locations
    perturb it on the logit / log / logit scale with the ``*_sd`` spreads.
    Post-period shifts are on the same link scales.

    Count truth is a log-linear stop rate: ``count_intercept`` plus the
    named effects, times the cell population, with NegBin dispersion
    ``count_phi`` (None for Poisson counts).

    Binary truth is a logistic search model over states and races with a
    linear trend in years since ``legalization_date`` and per-race
    treatment effects for stops in ``treated_states`` after that date.
    """

    seed: int = 20170601
    races: tuple = RACES
    locations: int = 20
    stops_per_group: int = 10_000
    periods: tuple = ('pre',)

    threshold_phi: tuple = (0.10, 0.14, 0.12)
    threshold_lam: tuple = (8.0, 7.0, 7.5)
    threshold_t: tuple = (0.25, 0.17, 0.15)
    phi_sd: float = 0.3
    lam_sd: float = 0.3
    threshold_sd: float = 0.2
    phi_post: tuple = (0.0, 0.0, 0.0)
    lam_post: tuple = (0.0, 0.0, 0.0)
    threshold_post: tuple = (0.0, 0.0, 0.0)

    count_intercept: float = -3.0
    count_effects: dict = field(default_factory=_stop_rate_effects)
    count_phi: float = 4.0
    years: tuple = (2013, 2014)
    population: int = None
    population_range: tuple = (500, 20_000)

    binary_intercept: float = -3.0
    binary_effects: dict = field(default_factory=_search_effects)
    state_sd: float = 0.3
    time_trend: float = -0.02
    treated_states: tuple = ('CO', 'WA')
    control_states: tuple = ('AZ', 'MT')
    treatment_effects: dict = None
    legalization_date: date = date(2012, 12, 31)
    date_range: tuple = (date(2011, 1, 1), date(2014, 12, 31))
    contraband_rate: float = 0.3

    def __post_init__(self):
        if self.locations < 1 or self.stops_per_group < 1:
            raise SynthError("need at least one location and one stop per group")
        for name in ('threshold_phi', 'threshold_lam', 'threshold_t', 'phi_post', 'lam_post', 'threshold_post'):
            if len(getattr(self, name)) != len(self.races):
                raise SynthError(f"{name} needs one value per race {self.races}")
        if any(not 0.0 < p < 1.0 for p in self.threshold_phi):
            raise SynthError("signal means must lie in (0, 1)")
        if any(lam <= 0 for lam in self.threshold_lam):
            raise SynthError("signal counts must be positive")
        if any(not 0.0 <= t <= 1.0 for t in self.threshold_t):
            raise SynthError("thresholds must lie in [0, 1]")
        if min(self.phi_sd, self.lam_sd, self.threshold_sd, self.state_sd) < 0:
            raise SynthError("spreads must be non-negative")
        if self.count_phi is not None and self.count_phi <= 0:
            raise SynthError("count dispersion must be positive")
        if set(self.periods) - {'pre', 'post'} or 'pre' not in self.periods:
            raise SynthError(f"periods must be ('pre',) or ('pre', 'post'), got {self.periods}")
        if set(self.treated_states) & set(self.control_states):
            raise SynthError("treated and control states overlap")
        if not self.date_range[0] <= self.legalization_date < self.date_range[1]:
            raise SynthError("legalization date must fall inside the date range")
        if not 0.0 <= self.contraband_rate <= 1.0:
            raise SynthError("contraband rate must lie in [0, 1]")

    def with_changes(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        payload = asdict(self)
        payload['legalization_date'] = self.legalization_date.isoformat()
        payload['date_range'] = [d.isoformat() for d in self.date_range]
        return payload
