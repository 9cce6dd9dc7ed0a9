"""
Row-level normalization rules.

``normalize_record`` maps a RawRow onto a StopRecord: dates and times are
parsed under the state's formats, ages derived and range-checked, races
coded (recorded Hispanic ethnicity wins), outcomes collapsed to the most
severe, and contraband cleared when no search was recorded. Unmappable values
become Unknown or absent and bump a per-field audit counter.
"""

import logging
import re
from collections import Counter
from datetime import datetime

from .exceptions import AmbiguousDateError
from .schemas import ReferenceTables
from .types import Gender, Location, LocationKind, Outcome, Race, StopRecord

logger = logging.getLogger(__name__)

MIN_AGE = 15
MAX_AGE = 100
_TWO_DIGIT_YEAR = re.compile(r'^\d{1,2}[/.-]\d{1,2}[/.-]\d{2}$')
_FIPS = re.compile(r'^\d{5}$')


class Audit(Counter):
    """Per-rule counters, keyed ``field.rule``."""

    def bump(self, key, amount=1):
        self[key] += amount


def _values(row, schema, name):
    """Non-empty raw values of a field, split on the multi-value separator."""
    out = []
    for column in schema.raw_columns(name):
        value = row.get(column, '').strip()
        if not value:
            continue
        if schema.multi_separator and name in ('violations', 'search_types', 'outcome'):
            out.extend(v.strip() for v in value.split(schema.multi_separator) if v.strip())
        else:
            out.append(value)
    return out


def _first(row, schema, name):
    values = _values(row, schema, name)
    return values[0] if values else None


def _lookup(vocab, raw, schema, tables):
    override = schema.values.get(vocab, {})
    key = raw.strip().lower()
    if key in override:
        key = override[key].lower()
    return getattr(tables, vocab).get(key)


def parse_date(value, formats):
    """Parse a date under ``formats``; two-digit years raise AmbiguousDateError."""
    if value is None:
        return None
    text = value.strip()
    candidates = [text]
    if ' ' in text or 'T' in text:
        candidates.append(re.split(r'[ T]', text, maxsplit=1)[0])
    for candidate in candidates:
        for fmt in formats:
            try:
                return datetime.strptime(candidate, fmt).date()
            except ValueError:
                continue
    if _TWO_DIGIT_YEAR.match(candidates[-1]):
        raise AmbiguousDateError(f"two-digit year in {value!r}")
    return None


def parse_time(value, formats):
    """Minute of day, or None."""
    if value is None:
        return None
    text = value.strip()
    candidates = [text]
    if ' ' in text or 'T' in text:
        candidates.append(re.split(r'[ T]', text, maxsplit=1)[-1])
    for candidate in candidates:
        for fmt in formats:
            try:
                parsed = datetime.strptime(candidate, fmt)
            except ValueError:
                continue
            return parsed.hour * 60 + parsed.minute
    return None


def age_between(birth, stop):
    """Completed years from ``birth`` to ``stop``."""
    years = stop.year - birth.year
    if (stop.month, stop.day) < (birth.month, birth.day):
        years -= 1
    return years


def _age(row, schema, stop_date, audit):
    birth_text = _first(row, schema, 'driver_birth_date')
    year_text = _first(row, schema, 'driver_birth_year')
    age_text = _first(row, schema, 'driver_age')
    age = None
    try:
        if birth_text and stop_date:
            birth = parse_date(birth_text, schema.date_formats)
            age = age_between(birth, stop_date) if birth else None
        elif year_text and stop_date:
            age = stop_date.year - int(float(year_text))
        elif age_text:
            age = int(float(age_text))
    except (ValueError, AmbiguousDateError):
        audit.bump('driver_age.unparseable')
        return None
    if age is None:
        if birth_text or year_text or age_text:
            audit.bump('driver_age.unparseable')
        return None
    if not MIN_AGE <= age < MAX_AGE:
        audit.bump('driver_age.out_of_range')
        return None
    return age


def _location(row, schema, tables, audit):
    raw = _first(row, schema, 'location')
    if raw is None:
        return None
    if schema.tagged_locations:
        try:
            return Location.parse(raw)
        except ValueError:
            audit.bump('location.unmapped')
            return None
    mapped = tables.locations.get((schema.state, raw.lower()))
    if mapped is None and schema.location_kind == LocationKind.COUNTY and _FIPS.match(raw):
        mapped = raw
    if mapped is None and schema.location_kind == LocationKind.DISTRICT:
        mapped = raw.strip().upper()
    if mapped is None:
        audit.bump('location.unmapped')
        return None
    return Location(schema.location_kind, mapped)


def _race(row, schema, tables, audit):
    raw = _first(row, schema, 'driver_race')
    race = Race.UNKNOWN
    if raw is not None:
        race = _lookup('race', raw, schema, tables)
        if race is None:
            audit.bump('driver_race.unmapped')
            race = Race.UNKNOWN
    ethnicity = _first(row, schema, 'driver_ethnicity')
    if ethnicity is not None:
        hispanic = _lookup('ethnicity', ethnicity, schema, tables)
        if hispanic is None:
            audit.bump('driver_ethnicity.unmapped')
        elif hispanic and race != Race.HISPANIC:
            audit.bump('driver_race.hispanic_ethnicity_override')
            race = Race.HISPANIC
    return race


def _flag(row, schema, name, audit):
    """Any true wins; all false gives False; nothing recorded gives None."""
    values = [ReferenceTables.parse_bool(v) for v in _values(row, schema, name)]
    if any(v is None for v in values):
        audit.bump(f"{name}.unparseable")
    values = [v for v in values if v is not None]
    if not values:
        return None
    return any(values)


def _coded_list(row, schema, tables, name, vocab, audit):
    out = []
    for raw in _values(row, schema, name):
        code = _lookup(vocab, raw, schema, tables)
        if code is None:
            audit.bump(f"{name}.unmapped")
        elif code not in out:
            out.append(code)
    return tuple(out)


def _outcome(row, schema, tables, audit):
    found = []
    for raw in _values(row, schema, 'outcome'):
        outcome = _lookup('outcome', raw, schema, tables)
        if outcome is None:
            audit.bump('outcome.unmapped')
        else:
            found.append(outcome)
    for outcome, columns in schema.outcome_flags.items():
        if any(ReferenceTables.parse_bool(row.get(c, '')) for c in columns):
            found.append(outcome)
    known = [o for o in found if o != Outcome.UNKNOWN]
    if len(set(known)) > 1:
        audit.bump('outcome.most_severe_resolved')
    return Outcome.most_severe(found)


def normalize_record(row, schema, tables, audit=None):
    """
    Apply the normalization rules to one raw row.

    Args:
        row (RawRow): Verbatim source values.
        schema (StateSchema): The state's column mapping.
        tables (ReferenceTables): Vocabulary and location lookups.
        audit (Audit): Counter updated in place.

    Returns:
        StopRecord

    Raises:
        AmbiguousDateError: Stop date written with a two-digit year; callers
            route the row to the error sink.
    """
    audit = Audit() if audit is None else audit

    date_text = _first(row, schema, 'stop_date')
    stop_date = parse_date(date_text, schema.date_formats)
    if date_text and stop_date is None:
        audit.bump('stop_date.unparseable')

    time_text = _first(row, schema, 'stop_time')
    stop_time = parse_time(time_text, schema.time_formats)
    if time_text and stop_time is None:
        audit.bump('stop_time.unparseable')
    if schema.midnight_missing and stop_time == 0:
        audit.bump('stop_time.midnight_missing')
        stop_time = None

    search = _flag(row, schema, 'search_conducted', audit)
    contraband = _flag(row, schema, 'contraband_found', audit)
    if contraband and not search:
        audit.bump('contraband_found.without_search')
        contraband = False

    purpose_raw = _first(row, schema, 'stop_purpose')
    purpose = None
    if purpose_raw is not None:
        purpose = _lookup('violation', purpose_raw, schema, tables)
        if purpose is None:
            audit.bump('stop_purpose.unmapped')

    gender_raw = _first(row, schema, 'driver_gender')
    gender = Gender.UNKNOWN
    if gender_raw is not None:
        gender = _lookup('gender', gender_raw, schema, tables) or Gender.UNKNOWN
        if gender == Gender.UNKNOWN and gender_raw.strip().lower() not in ('unknown', 'u'):
            audit.bump('driver_gender.unmapped')

    surname = _first(row, schema, 'driver_surname')
    source_line = _first(row, schema, 'source_line')

    return StopRecord(
        state=schema.state,
        stop_date=stop_date,
        stop_time=stop_time,
        location=_location(row, schema, tables, audit),
        driver_race=_race(row, schema, tables, audit),
        driver_gender=gender,
        driver_age=_age(row, schema, stop_date, audit),
        violations=_coded_list(row, schema, tables, 'violations', 'violation', audit),
        stop_purpose=purpose,
        search_conducted=search,
        search_types=_coded_list(row, schema, tables, 'search_types', 'search_type', audit),
        contraband_found=contraband,
        outcome=_outcome(row, schema, tables, audit),
        driver_surname=surname.upper() if surname else None,
        source_line=int(source_line) if source_line else row.line_number,
        identifiers={name: row.get(column, '').strip() for name, column in schema.identifiers.items()},
    )


def format_time(minutes):
    return None if minutes is None else f"{minutes // 60:02d}:{minutes % 60:02d}"


def record_to_row(record):
    """Standardized column values of a record (the inverse of reading them)."""
    def flag(value):
        return '' if value is None else ('true' if value else 'false')

    return {
        'state': record.state,
        'stop_date': record.stop_date.isoformat() if record.stop_date else '',
        'stop_time': format_time(record.stop_time) or '',
        'location': str(record.location) if record.location else '',
        'driver_race': record.driver_race.value,
        'driver_gender': record.driver_gender.value,
        'driver_age': '' if record.driver_age is None else str(record.driver_age),
        'violations': '|'.join(record.violations),
        'stop_purpose': record.stop_purpose or '',
        'search_conducted': flag(record.search_conducted),
        'search_types': '|'.join(t.value for t in record.search_types),
        'contraband_found': flag(record.contraband_found),
        'outcome': record.outcome.value,
        'driver_surname': record.driver_surname or '',
        'source_line': str(record.source_line),
    }

