"""
Per-state normalization pipeline, analysis-set filter, availability report,
standardized CSV I/O and the DataFrame view the analyses work from.
"""

import csv
import io
import logging
from dataclasses import asdict, dataclass, field

import pandas as pd

from .dedupe import dedupe
from .exceptions import RecordRejected, RecordsError
from .normalize import Audit, normalize_record, record_to_row
from .parsing import ErrorSink, parse_source
from .schemas import RECORD_FIELDS, ReferenceTables, standard_schema
from .surnames import DEFAULT_CUTOFF, reclassify_hispanic
from .types import Gender, Outcome, Race

logger = logging.getLogger(__name__)

ANALYSIS_YEARS = (2011, 2015)
ANALYSIS_RACES = (Race.WHITE, Race.BLACK, Race.HISPANIC)
AVAILABILITY_CUTOFF = 0.70

AGE_BINS = (('16-19', 16, 20), ('20-29', 20, 30), ('30-39', 30, 40), ('40-49', 40, 50), ('50+', 50, 100))
HOUR_BINS = tuple(f"{h:02d}-{h + 3:02d}" for h in range(0, 24, 3))

# Which record attribute makes a Table-1 style column "present"
AVAILABILITY_FIELDS = {
    'stop_date': lambda r: r.stop_date is not None,
    'stop_time': lambda r: r.stop_time is not None,
    'location': lambda r: r.location is not None,
    'driver_race': lambda r: r.driver_race != Race.UNKNOWN,
    'driver_gender': lambda r: r.driver_gender != Gender.UNKNOWN,
    'driver_age': lambda r: r.driver_age is not None,
    'stop_reason': lambda r: bool(r.violations) or r.stop_purpose is not None,
    'search_conducted': lambda r: r.search_conducted is not None,
    'search_types': lambda r: bool(r.search_types),
    'contraband_found': lambda r: r.contraband_found is not None,
    'outcome': lambda r: r.outcome != Outcome.UNKNOWN,
}
# measured over searched stops only
SEARCH_FIELDS = ('search_types', 'contraband_found')


@dataclass
class AuditReport:
    """Counts for one state run; ``conserved`` checks the row accounting."""

    state: str
    input_rows: int = 0
    parse_errors: int = 0
    rejected: int = 0
    duplicates_removed: int = 0
    output_rows: int = 0
    relabeled_hispanic: int = 0
    rules: dict = field(default_factory=dict)

    @property
    def error_sink_rows(self):
        return self.parse_errors + self.rejected

    @property
    def error_rate(self):
        return self.error_sink_rows / self.input_rows if self.input_rows else 0.0

    @property
    def conserved(self):
        return self.input_rows == self.output_rows + self.error_sink_rows + self.duplicates_removed

    def to_dict(self):
        payload = asdict(self)
        payload.update(error_sink_rows=self.error_sink_rows, error_rate=self.error_rate, conserved=self.conserved)
        payload['rules'] = dict(sorted(self.rules.items()))
        return payload


def normalize_state(source, schema, tables=None, surnames=None, surname_states=(),
                    cutoff=DEFAULT_CUTOFF, sink=None):
    """
    Parse, normalize, deduplicate and reclassify one state's export.

    Args:
        source: Path or binary stream of the raw export.
        schema (StateSchema): The state's schema.
        tables (ReferenceTables): Lookups; built-ins when omitted.
        surnames (dict): Surname table for ``surname_states``.
        sink (ErrorSink): Shared sink; a fresh one when omitted.

    Returns:
        tuple(list, AuditReport, ErrorSink)
    """
    tables = tables or ReferenceTables()
    sink = sink if sink is not None else ErrorSink()
    audit = Audit()
    report = AuditReport(schema.state)
    sink_before = sink.count(schema.state)

    records = []
    for row in parse_source(source, schema, sink):
        report.input_rows += 1
        try:
            records.append(normalize_record(row, schema, tables, audit))
        except RecordRejected as exc:
            report.rejected += 1
            sink.add(schema.state, row.line_number, str(exc), schema.delimiter.join(row.columns.values()))
    report.parse_errors = sink.count(schema.state) - sink_before - report.rejected
    report.input_rows += report.parse_errors

    if schema.dedup_key is not None:
        result = dedupe(records, schema.dedup_key)
        records, report.duplicates_removed = result.records, result.removed

    if schema.state in set(surname_states):
        records, report.relabeled_hispanic = reclassify_hispanic(records, surnames, {schema.state}, cutoff)

    report.output_rows = len(records)
    report.rules = dict(audit)
    if not report.conserved:
        raise RecordsError(f"{schema.state}: audit counts do not reconcile: {report.to_dict()}")
    logger.info(
        f"Normalized {schema.state}: {report.input_rows} rows in, {report.output_rows} out, "
        f"{report.error_sink_rows} to error sink, {report.duplicates_removed} duplicates"
    )
    return records, report, sink


def filter_analysis_set(records, years=ANALYSIS_YEARS, races=ANALYSIS_RACES):
    """Stops dated within ``years`` (inclusive) with a race in ``races``."""
    first, last = years
    races = {Race(r) for r in races}
    return [
        r for r in records
        if r.stop_date is not None and first <= r.stop_date.year <= last and r.driver_race in races
    ]


def availability_report(records, cutoff=AVAILABILITY_CUTOFF):
    """
    Share of stops carrying each field, per state.

    Returns:
        dict: ``{state: {field: {'share': float, 'available': bool}}}``
    """
    by_state = {}
    for record in records:
        by_state.setdefault(record.state, []).append(record)
    report = {}
    for state, rows in sorted(by_state.items()):
        report[state] = {}
        searched = [r for r in rows if r.search_conducted]
        for name, present in AVAILABILITY_FIELDS.items():
            pool = searched if name in SEARCH_FIELDS else rows
            share = sum(1 for r in pool if present(r)) / len(pool) if pool else 0.0
            report[state][name] = {'share': share, 'available': share >= cutoff}
    return report


def available_states(report, required):
    """States whose availability report marks every field in ``required``."""
    return sorted(s for s, row in report.items() if all(row[f]['available'] for f in required))


def write_standardized(records, handle):
    """Write records as CSV with the fixed standardized column order."""
    writer = csv.DictWriter(handle, fieldnames=RECORD_FIELDS, lineterminator='\n')
    writer.writeheader()
    for record in records:
        writer.writerow(record_to_row(record))


def read_standardized(source, state, tables=None):
    """Read a standardized CSV back into records (one state per file)."""
    tables = tables or ReferenceTables()
    if isinstance(source, str):
        source = io.BytesIO(source.encode('utf-8'))
    sink = ErrorSink()
    schema = standard_schema(state)
    records = [normalize_record(row, schema, tables) for row in parse_source(source, schema, sink)]
    if len(sink):
        raise RecordsError(f"{state}: {len(sink)} malformed lines in standardized file")
    return records


def age_bin(age):
    if age is None:
        return None
    for label, low, high in AGE_BINS:
        if low <= age < high:
            return label
    return None


def hour_bin(minutes):
    return None if minutes is None else HOUR_BINS[minutes // 180]


def records_to_frame(records):
    """One row per stop with the derived columns the analyses group on."""
    rows = []
    for r in records:
        rows.append({
            'state': r.state,
            'stop_date': pd.Timestamp(r.stop_date) if r.stop_date else pd.NaT,
            'year': r.stop_date.year if r.stop_date else None,
            'quarter': f"{r.stop_date.year}Q{(r.stop_date.month - 1) // 3 + 1}" if r.stop_date else None,
            'weekday': r.stop_date.strftime('%a') if r.stop_date else None,
            'hour_bin': hour_bin(r.stop_time),
            'location': str(r.location) if r.location else None,
            'race': r.driver_race.value,
            'gender': r.driver_gender.value if r.driver_gender != Gender.UNKNOWN else None,
            'age': r.driver_age,
            'age_bin': age_bin(r.driver_age),
            'violations': r.violations,
            'stop_purpose': r.stop_purpose,
            'search_conducted': r.search_conducted,
            'search_types': tuple(t.value for t in r.search_types),
            'contraband_found': r.contraband_found,
            'outcome': r.outcome.value,
        })
    frame = pd.DataFrame(rows, columns=[
        'state', 'stop_date', 'year', 'quarter', 'weekday', 'hour_bin', 'location', 'race', 'gender',
        'age', 'age_bin', 'violations', 'stop_purpose', 'search_conducted', 'search_types',
        'contraband_found', 'outcome',
    ])
    frame['year'] = frame['year'].astype('Int64')
    frame['age'] = frame['age'].astype('Int64')
    for column in ('search_conducted', 'contraband_found'):
        frame[column] = frame[column].astype('boolean')
    return frame
