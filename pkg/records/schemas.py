"""
Per-state schemas and reference vocabularies.

A state schema is a flat ``key = value`` file (``#`` comments, dotted keys
for grouping) mapping raw export columns onto standardized fields:

    state = CO
    delimiter = ,
    date_formats = %Y-%m-%d, %m/%d/%Y
    location.kind = county
    columns.stop_date = StopDate
    columns.search_conducted = Searched, VehicleSearched
    outcome.flags = Arrest: ArrestMade, Citation: CitationIssued
    identifiers.officer_id = OfficerID
    dedup.key = officer_id, driver_birth_date, stop_date, stop_time
    values.race.W = White

Reference tables hold the vocabulary maps (race, gender, outcome, search
type, violation taxonomy) and the location lookups that turn raw
geography values into county FIPS codes or district ids.
"""

import configparser
import csv
import io
import logging
from dataclasses import dataclass, field

from .exceptions import SchemaError
from .types import DedupKey, Gender, LocationKind, Outcome, Race, SearchType

logger = logging.getLogger(__name__)

MULTI_FIELDS = ('violations', 'search_conducted', 'search_types', 'contraband_found', 'outcome')
SCALAR_FIELDS = (
    'stop_date', 'stop_time', 'location', 'driver_race', 'driver_ethnicity', 'driver_gender',
    'driver_age', 'driver_birth_date', 'driver_birth_year', 'stop_purpose', 'driver_surname',
    'source_line',
)
KNOWN_FIELDS = MULTI_FIELDS + SCALAR_FIELDS
RECORD_FIELDS = (
    'state', 'stop_date', 'stop_time', 'location', 'driver_race', 'driver_gender', 'driver_age',
    'violations', 'stop_purpose', 'search_conducted', 'search_types', 'contraband_found',
    'outcome', 'driver_surname', 'source_line',
)


def _split(value, separator=','):
    return tuple(part.strip() for part in value.split(separator) if part.strip())


def _parse_flat(text, source):
    parser = configparser.ConfigParser(
        interpolation=None, comment_prefixes=('#',), inline_comment_prefixes=('#',), delimiters=('=',),
    )
    parser.optionxform = str
    try:
        parser.read_string('[root]\n' + text, source=source)
    except configparser.Error as exc:
        raise SchemaError(f"{source}: {exc}") from exc
    return dict(parser['root'])


@dataclass(frozen=True)
class StateSchema:
    """Column mapping and parsing options for one state's export."""

    state: str
    columns: dict
    location_kind: LocationKind = LocationKind.COUNTY
    delimiter: str = ','
    quotechar: str = '"'
    encoding: str = 'utf-8'
    date_formats: tuple = ('%Y-%m-%d',)
    time_formats: tuple = ('%H:%M', '%H:%M:%S')
    multi_separator: str = None
    outcome_flags: dict = field(default_factory=dict)
    identifiers: dict = field(default_factory=dict)
    dedup_key: DedupKey = None
    midnight_missing: bool = False
    values: dict = field(default_factory=dict)
    tagged_locations: bool = False

    def __post_init__(self):
        unknown = set(self.columns) - set(KNOWN_FIELDS)
        if unknown:
            raise SchemaError(f"{self.state}: unknown standardized fields {sorted(unknown)}")
        for fmt in self.date_formats:
            if '%y' in fmt:
                raise SchemaError(f"{self.state}: two-digit year format {fmt!r} is ambiguous")
        if self.dedup_key is not None:
            available = set(self.columns) | set(self.identifiers) | {'state'}
            missing = [name for name in self.dedup_key.column_names if name not in available]
            if missing:
                raise SchemaError(f"{self.state}: dedup key fields not in schema: {missing}")

    def raw_columns(self, name):
        """Raw columns mapped to a standardized field (empty if unmapped)."""
        return self.columns.get(name, ())

    @property
    def required_columns(self):
        needed = [c for cols in self.columns.values() for c in cols]
        needed += [c for cols in self.outcome_flags.values() for c in cols]
        needed += list(self.identifiers.values())
        return tuple(dict.fromkeys(needed))

    def validate_header(self, header):
        missing = [c for c in self.required_columns if c not in header]
        if missing:
            raise SchemaError(f"{self.state}: schema references columns missing from source: {missing}")

    @classmethod
    def from_text(cls, text, source='<schema>'):
        flat = _parse_flat(text, source)
        if 'state' not in flat:
            raise SchemaError(f"{source}: missing required key 'state'")
        columns, flags, identifiers, values = {}, {}, {}, {}
        for key, value in flat.items():
            group, _, name = key.partition('.')
            if group == 'columns':
                columns[name] = _split(value)
            elif group == 'identifiers':
                identifiers[name] = value.strip()
            elif group == 'values':
                vocab, _, raw = name.partition('.')
                values.setdefault(vocab, {})[raw.strip().lower()] = value.strip()
            elif key == 'outcome.flags':
                for item in _split(value):
                    outcome, _, column = item.partition(':')
                    flags.setdefault(Outcome(outcome.strip()), []).append(column.strip())
        options = {
            'delimiter': flat.get('delimiter', ',').replace('\\t', '\t'),
            'quotechar': flat.get('quotechar', '"'),
            'encoding': flat.get('encoding', 'utf-8'),
            'midnight_missing': flat.get('midnight_missing', 'false').lower() in ('true', 'yes', '1'),
            'tagged_locations': flat.get('location.tagged', 'false').lower() in ('true', 'yes', '1'),
        }
        if 'date_formats' in flat:
            options['date_formats'] = _split(flat['date_formats'])
        if 'time_formats' in flat:
            options['time_formats'] = _split(flat['time_formats'])
        if 'multi_separator' in flat:
            options['multi_separator'] = flat['multi_separator']
        try:
            kind = LocationKind(flat.get('location.kind', 'county'))
        except ValueError:
            raise SchemaError(f"{source}: unknown location kind {flat['location.kind']!r}") from None
        dedup = DedupKey(_split(flat['dedup.key'])) if flat.get('dedup.key') else None
        return cls(
            state=flat['state'].strip().upper(),
            columns=columns,
            location_kind=kind,
            outcome_flags={k: tuple(v) for k, v in flags.items()},
            identifiers=identifiers,
            dedup_key=dedup,
            values=values,
            **options,
        )

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, encoding='utf-8') as handle:
                return cls.from_text(handle.read(), source=str(path))
        except OSError as exc:
            raise SchemaError(f"cannot read schema {path}: {exc}") from exc


def standard_schema(state):
    """Schema that reads the standardized CSV layout back in unchanged."""
    return StateSchema(
        state=state,
        columns={name: (name,) for name in RECORD_FIELDS if name != 'state'},
        date_formats=('%Y-%m-%d',),
        time_formats=('%H:%M',),
        multi_separator='|',
        tagged_locations=True,
    )


_TRUE = frozenset({'true', 't', 'yes', 'y', '1'})
_FALSE = frozenset({'false', 'f', 'no', 'n', '0'})

_RACE = {
    'white': Race.WHITE, 'w': Race.WHITE, 'caucasian': Race.WHITE,
    'black': Race.BLACK, 'b': Race.BLACK, 'african american': Race.BLACK,
    'hispanic': Race.HISPANIC, 'h': Race.HISPANIC, 'latino': Race.HISPANIC, 'l': Race.HISPANIC,
    'asian': Race.ASIAN, 'a': Race.ASIAN, 'south asian': Race.ASIAN, 'pacific islander': Race.ASIAN,
    'asian/pacific islander': Race.ASIAN,
    'other': Race.OTHER, 'o': Race.OTHER, 'native american': Race.OTHER, 'alaskan native': Race.OTHER,
    'american indian': Race.OTHER, 'i': Race.OTHER,
    'unknown': Race.UNKNOWN, 'u': Race.UNKNOWN,
}

_ETHNICITY = {
    'hispanic': True, 'h': True, 'latino': True, 'hispanic or latino': True, 'y': True, 'yes': True,
    'non-hispanic': False, 'n': False, 'no': False, 'not hispanic': False,
}

_GENDER = {'male': Gender.MALE, 'm': Gender.MALE, 'female': Gender.FEMALE, 'f': Gender.FEMALE,
           'unknown': Gender.UNKNOWN, 'u': Gender.UNKNOWN}

_OUTCOME = {
    'arrest': Outcome.ARREST, 'arrested': Outcome.ARREST, 'custodial arrest': Outcome.ARREST,
    'summons': Outcome.SUMMONS,
    'citation': Outcome.CITATION, 'ticket': Outcome.CITATION, 'cite': Outcome.CITATION,
    'written warning': Outcome.WRITTEN_WARNING, 'warning': Outcome.WRITTEN_WARNING,
    'writtenwarning': Outcome.WRITTEN_WARNING,
    'verbal warning': Outcome.VERBAL_WARNING, 'verbalwarning': Outcome.VERBAL_WARNING,
    'none': Outcome.NONE, 'no action': Outcome.NONE,
    'unknown': Outcome.UNKNOWN,
}

_SEARCH_TYPE = {
    'consent': SearchType.CONSENT,
    'probable cause': SearchType.PROBABLE_CAUSE, 'probablecause': SearchType.PROBABLE_CAUSE,
    'incident to arrest': SearchType.INCIDENT_TO_ARREST, 'incidenttoarrest': SearchType.INCIDENT_TO_ARREST,
    'inventory': SearchType.INVENTORY,
    'warrant': SearchType.WARRANT,
    'protective frisk': SearchType.PROTECTIVE_FRISK, 'protectivefrisk': SearchType.PROTECTIVE_FRISK,
    'frisk': SearchType.PROTECTIVE_FRISK,
    'k9': SearchType.K9, 'canine': SearchType.K9,
    'other': SearchType.OTHER,
}

VIOLATION_CODES = (
    'license/registration', 'license/registration/license', 'license/registration/registration-plates',
    'license/registration/paperwork', 'speeding', 'seat-belt', 'stop-sign/light', 'equipment',
    'equipment/lights', 'dui', 'moving', 'moving/safe-movement', 'moving/cell-phone', 'truck',
    'drug/possession', 'drug/marijuana-possession', 'other',
)

_VIOLATION = {code: code for code in VIOLATION_CODES}
_VIOLATION.update({
    'speed': 'speeding', 'speed over limit': 'speeding', 'exceeding speed limit': 'speeding',
    'seat belt': 'seat-belt', 'seatbelt': 'seat-belt',
    'stop sign': 'stop-sign/light', 'red light': 'stop-sign/light', 'traffic signal': 'stop-sign/light',
    'equipment violation': 'equipment', 'headlight': 'equipment/lights', 'taillight': 'equipment/lights',
    'license': 'license/registration/license', 'registration': 'license/registration/registration-plates',
    'plates': 'license/registration/registration-plates', 'insurance': 'license/registration/paperwork',
    'paperwork': 'license/registration/paperwork',
    'dwi': 'dui', 'driving under the influence': 'dui',
    'moving violation': 'moving', 'unsafe lane change': 'moving/safe-movement',
    'cell phone': 'moving/cell-phone', 'texting': 'moving/cell-phone',
    'commercial vehicle': 'truck',
    'drug possession': 'drug/possession', 'possession of controlled substance': 'drug/possession',
    'marijuana possession': 'drug/marijuana-possession',
    'possession of marijuana': 'drug/marijuana-possession',
})


@dataclass
class ReferenceTables:
    """Vocabulary maps (lowercase raw text -> standardized value) and lookups.

    ``locations`` maps ``(state, raw_lowercase)`` to a location id;
    ``district_counties`` maps ``(state, district_id)`` to the county FIPS
    codes a district subsumes.
    """

    race: dict = field(default_factory=lambda: dict(_RACE))
    ethnicity: dict = field(default_factory=lambda: dict(_ETHNICITY))
    gender: dict = field(default_factory=lambda: dict(_GENDER))
    outcome: dict = field(default_factory=lambda: dict(_OUTCOME))
    search_type: dict = field(default_factory=lambda: dict(_SEARCH_TYPE))
    violation: dict = field(default_factory=lambda: dict(_VIOLATION))
    locations: dict = field(default_factory=dict)
    district_counties: dict = field(default_factory=dict)

    def __post_init__(self):
        # canonical enum values read back as themselves
        for table, enum in ((self.race, Race), (self.gender, Gender), (self.outcome, Outcome),
                            (self.search_type, SearchType)):
            for member in enum:
                table.setdefault(member.value.lower(), member)

    @staticmethod
    def parse_bool(value):
        text = value.strip().lower()
        if text in _TRUE:
            return True
        if text in _FALSE:
            return False
        return None

    def extend_from_csv(self, text):
        """Add entries from ``kind,state,raw,value`` rows.

        ``kind`` is one of race, ethnicity, gender, outcome, search_type,
        violation, location or district_county (value = county FIPS).
        """
        enums = {'race': Race, 'gender': Gender, 'outcome': Outcome, 'search_type': SearchType}
        for line_number, row in enumerate(csv.DictReader(io.StringIO(text)), start=2):
            try:
                kind, state = row['kind'].strip(), row['state'].strip().upper()
                raw, value = row['raw'].strip(), row['value'].strip()
            except (KeyError, AttributeError):
                raise SchemaError(f"reference table line {line_number}: expected kind,state,raw,value") from None
            if kind == 'location':
                self.locations[(state, raw.lower())] = value
            elif kind == 'district_county':
                self.district_counties.setdefault((state, raw), []).append(value)
            elif kind == 'ethnicity':
                self.ethnicity[raw.lower()] = ReferenceTables.parse_bool(value)
            elif kind == 'violation':
                if value not in VIOLATION_CODES:
                    raise SchemaError(f"reference table line {line_number}: unknown violation code {value!r}")
                self.violation[raw.lower()] = value
            elif kind in enums:
                try:
                    getattr(self, kind)[raw.lower()] = enums[kind](value)
                except ValueError:
                    raise SchemaError(f"reference table line {line_number}: bad {kind} value {value!r}") from None
            else:
                raise SchemaError(f"reference table line {line_number}: unknown kind {kind!r}")
        logger.info(
            f"Reference tables: {len(self.locations)} location entries, "
            f"{len(self.district_counties)} districts"
        )
        return self

    def counties_for(self, state, district):
        return tuple(self.district_counties.get((state, district), ()))
