"""
Standardized stop records and the vocabularies they are coded in.
"""

from dataclasses import dataclass, field, fields, replace
from datetime import date
from enum import Enum


class Race(str, Enum):
    WHITE = 'White'
    BLACK = 'Black'
    HISPANIC = 'Hispanic'
    ASIAN = 'Asian'
    OTHER = 'Other'
    UNKNOWN = 'Unknown'


class Gender(str, Enum):
    MALE = 'Male'
    FEMALE = 'Female'
    UNKNOWN = 'Unknown'


class Outcome(str, Enum):
    """Stop outcome; ``severity`` orders them Arrest > ... > None > Unknown."""

    ARREST = 'Arrest'
    SUMMONS = 'Summons'
    CITATION = 'Citation'
    WRITTEN_WARNING = 'WrittenWarning'
    VERBAL_WARNING = 'VerbalWarning'
    NONE = 'None'
    UNKNOWN = 'Unknown'

    @property
    def severity(self):
        return _SEVERITY[self]

    @classmethod
    def most_severe(cls, outcomes):
        outcomes = list(outcomes)
        if not outcomes:
            return cls.UNKNOWN
        return max(outcomes, key=lambda o: o.severity)


_SEVERITY = {
    Outcome.ARREST: 6,
    Outcome.SUMMONS: 5,
    Outcome.CITATION: 4,
    Outcome.WRITTEN_WARNING: 3,
    Outcome.VERBAL_WARNING: 2,
    Outcome.NONE: 1,
    Outcome.UNKNOWN: 0,
}


class SearchType(str, Enum):
    CONSENT = 'Consent'
    PROBABLE_CAUSE = 'ProbableCause'
    INCIDENT_TO_ARREST = 'IncidentToArrest'
    INVENTORY = 'Inventory'
    WARRANT = 'Warrant'
    PROTECTIVE_FRISK = 'ProtectiveFrisk'
    K9 = 'K9'
    OTHER = 'Other'


class LocationKind(str, Enum):
    COUNTY = 'county'
    DISTRICT = 'district'


@dataclass(frozen=True, order=True)
class Location:
    kind: LocationKind
    id: str

    def __str__(self):
        return f"{self.kind.value}:{self.id}"

    @classmethod
    def parse(cls, text):
        kind, _, ident = text.partition(':')
        if not ident:
            raise ValueError(f"location {text!r} is not of the form kind:id")
        return cls(LocationKind(kind), ident)


@dataclass(frozen=True)
class RawRow:
    """One source line: column name -> verbatim string value."""

    source_state: str
    columns: dict
    line_number: int = 0

    def get(self, column, default=''):
        return self.columns.get(column, default)


@dataclass
class StopRecord:
    state: str
    stop_date: date = None
    stop_time: int = None
    location: Location = None
    driver_race: Race = Race.UNKNOWN
    driver_gender: Gender = Gender.UNKNOWN
    driver_age: int = None
    violations: tuple = ()
    stop_purpose: str = None
    search_conducted: bool = None
    search_types: tuple = ()
    contraband_found: bool = None
    outcome: Outcome = Outcome.UNKNOWN
    driver_surname: str = None
    source_line: int = 0
    identifiers: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.driver_age is not None and not 15 <= self.driver_age < 100:
            raise ValueError(f"driver_age {self.driver_age} outside [15, 100)")
        if self.contraband_found and not self.search_conducted:
            raise ValueError("contraband_found requires search_conducted")

    @property
    def year(self):
        return self.stop_date.year if self.stop_date else None

    def value(self, name):
        """Field or identifier value by name (identifiers win on clashes)."""
        if name in self.identifiers:
            return self.identifiers[name]
        return getattr(self, name)

    def with_changes(self, **changes):
        return replace(self, **changes)


STANDARD_FIELDS = tuple(f.name for f in fields(StopRecord) if f.name != 'identifiers')


@dataclass(frozen=True)
class SurnameEntry:
    name: str
    pct_hispanic: float

    def __post_init__(self):
        if not 0.0 <= self.pct_hispanic <= 1.0:
            raise ValueError(f"pct_hispanic {self.pct_hispanic} outside [0, 1] for {self.name}")


@dataclass(frozen=True)
class DedupKey:
    column_names: tuple

    def __post_init__(self):
        if not self.column_names:
            raise ValueError("dedup key needs at least one field")

    def of(self, record):
        """Key tuple for ``record``, or None when any key field is missing."""
        values = tuple(record.value(name) for name in self.column_names)
        if any(v is None or v == '' for v in values):
            return None
        return values
