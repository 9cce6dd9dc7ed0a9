import csv
import io
import json
import os
import tempfile
from datetime import date
from unittest.mock import patch

from django.core.cache import cache
from django.test import SimpleTestCase

from .dedupe import dedupe
from .exceptions import AmbiguousDateError, SchemaError, SurnameTableMissing
from .normalize import Audit, normalize_record
from .parsing import ErrorSink, parse_source
from .pipeline import (
    availability_report, available_states, filter_analysis_set, normalize_state, read_standardized,
    records_to_frame, write_standardized,
)
from .schemas import ReferenceTables, StateSchema
from .surnames import clean_surname, load_surnames, reclassify_hispanic
from .types import DedupKey, Gender, Location, LocationKind, Outcome, Race, RawRow, SearchType, StopRecord
from .utils import get_reference_tables

SCHEMA_TEXT = """
# Colorado-style export
state = CO
date_formats = %Y-%m-%d, %m/%d/%Y
multi_separator = ;
location.kind = county
columns.stop_date = StopDate
columns.stop_time = StopTime
columns.location = County
columns.driver_race = Race
columns.driver_ethnicity = Ethnicity
columns.driver_gender = Gender
columns.driver_age = Age
columns.driver_birth_date = DOB
columns.violations = Violation
columns.search_conducted = Searched
columns.search_types = SearchType
columns.contraband_found = Contraband
columns.outcome = Outcome
columns.driver_surname = LastName
identifiers.officer_id = OfficerID
dedup.key = officer_id, stop_date, stop_time, driver_surname
"""

HEADER = [
    'OfficerID', 'StopDate', 'StopTime', 'County', 'Race', 'Ethnicity', 'Gender', 'Age', 'DOB',
    'Violation', 'Searched', 'SearchType', 'Contraband', 'Outcome', 'LastName',
]


def stop_row(**overrides):
    row = {
        'OfficerID': '17', 'StopDate': '2013-05-02', 'StopTime': '14:05', 'County': '08031',
        'Race': 'W', 'Ethnicity': 'N', 'Gender': 'M', 'Age': '', 'DOB': '', 'Violation': 'Speed',
        'Searched': 'N', 'SearchType': '', 'Contraband': 'N', 'Outcome': 'Citation', 'LastName': 'Smith',
    }
    row.update(overrides)
    return row


def to_csv(rows, header=HEADER):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(header)
    for row in rows:
        writer.writerow([row[c] for c in header] if isinstance(row, dict) else row)
    return buffer.getvalue().encode('utf-8')


def raw(**overrides):
    return RawRow('CO', stop_row(**overrides), 2)


class ParseSourceTest(SimpleTestCase):
    """Test cases for delimited parsing"""

    def setUp(self):
        self.schema = StateSchema.from_text(SCHEMA_TEXT)

    def test_header_excluded(self):
        """Test a 3-line CSV yields two rows"""
        sink = ErrorSink()
        rows = list(parse_source(io.BytesIO(to_csv([stop_row(), stop_row()])), self.schema, sink))
        self.assertEqual(len(rows), 2)
        self.assertEqual(rows[0].line_number, 2)
        self.assertEqual(len(sink), 0)

    def test_quoted_delimiter_kept_intact(self):
        """Test an embedded quoted delimiter stays inside one value"""
        data = to_csv([stop_row(LastName='Smith, Jr.')])
        expected = list(csv.reader(io.StringIO(data.decode())))[1]
        rows = list(parse_source(io.BytesIO(data), self.schema, ErrorSink()))
        self.assertEqual(len(rows), 1)
        self.assertEqual(list(rows[0].columns.values()), expected)
        self.assertEqual(rows[0].get('LastName'), 'Smith, Jr.')

    def test_empty_file(self):
        """Test an empty file is an empty stream with no errors"""
        sink = ErrorSink()
        self.assertEqual(list(parse_source(io.BytesIO(b''), self.schema, sink)), [])
        self.assertEqual(len(sink), 0)

    def test_malformed_line_goes_to_sink(self):
        """Test short lines are routed to the sink with their line number"""
        data = to_csv([stop_row(), ['17', '2013-05-02'], stop_row()])
        sink = ErrorSink()
        rows = list(parse_source(io.BytesIO(data), self.schema, sink))
        self.assertEqual(len(rows), 2)
        self.assertEqual(len(sink), 1)
        self.assertEqual(sink.entries[0].line_number, 3)

        out = io.StringIO()
        sink.write_csv(out)
        self.assertIn('expected 15 fields, found 2', out.getvalue())

    def test_missing_column_raises(self):
        """Test a schema column absent from the header is fatal"""
        data = to_csv([], header=HEADER[:-1])
        with self.assertRaises(SchemaError):
            list(parse_source(io.BytesIO(data), self.schema, ErrorSink()))

    def test_duplicate_header_raises(self):
        """Test repeated column names are rejected"""
        data = to_csv([], header=HEADER + ['Race'])
        with self.assertRaises(SchemaError):
            list(parse_source(io.BytesIO(data), self.schema, ErrorSink()))


class StateSchemaTest(SimpleTestCase):
    """Test cases for schema files"""

    def test_parsed_fields(self):
        """Test key = value parsing into the schema"""
        schema = StateSchema.from_text(SCHEMA_TEXT)
        self.assertEqual(schema.state, 'CO')
        self.assertEqual(schema.multi_separator, ';')
        self.assertEqual(schema.raw_columns('driver_race'), ('Race',))
        self.assertEqual(schema.dedup_key.column_names, ('officer_id', 'stop_date', 'stop_time', 'driver_surname'))

    def test_two_digit_year_format_rejected(self):
        with self.assertRaises(SchemaError):
            StateSchema.from_text("state = CO\ndate_formats = %m/%d/%y\n")

    def test_dedup_key_must_exist(self):
        """Test dedup key fields outside the schema are rejected"""
        with self.assertRaises(SchemaError):
            StateSchema.from_text("state = CO\ncolumns.stop_date = D\ndedup.key = badge\n")

    def test_unknown_field_rejected(self):
        with self.assertRaises(SchemaError):
            StateSchema.from_text("state = CO\ncolumns.shoe_size = S\n")


class NormalizeRecordTest(SimpleTestCase):
    """Test cases for the row normalization rules"""

    def setUp(self):
        self.schema = StateSchema.from_text(SCHEMA_TEXT)
        self.tables = ReferenceTables()

    def normalize(self, audit=None, **overrides):
        return normalize_record(raw(**overrides), self.schema, self.tables, audit)

    def test_age_from_birth_date(self):
        """Test birth date 1990-05-01 and stop 2013-05-02 give age 23"""
        record = self.normalize(DOB='1990-05-01', Age='40')
        self.assertEqual(record.driver_age, 23)

    def test_age_day_before_birthday(self):
        record = self.normalize(DOB='1990-05-03')
        self.assertEqual(record.driver_age, 22)

    def test_implausible_age_absent(self):
        """Test age 112 becomes absent and is counted"""
        audit = Audit()
        record = self.normalize(audit, Age='112')
        self.assertIsNone(record.driver_age)
        self.assertEqual(audit['driver_age.out_of_range'], 1)

    def test_age_lower_bound(self):
        self.assertEqual(self.normalize(Age='15').driver_age, 15)
        self.assertIsNone(self.normalize(Age='14').driver_age)

    def test_most_severe_outcome(self):
        """Test {citation, written warning} resolves to Citation"""
        audit = Audit()
        record = self.normalize(audit, Outcome='Written Warning;Citation')
        self.assertEqual(record.outcome, Outcome.CITATION)
        self.assertEqual(audit['outcome.most_severe_resolved'], 1)

    def test_contraband_without_search_cleared(self):
        """Test contraband flagged without a search is set false"""
        audit = Audit()
        record = self.normalize(audit, Searched='N', Contraband='Y')
        self.assertFalse(record.contraband_found)
        self.assertEqual(audit['contraband_found.without_search'], 1)

    def test_hispanic_ethnicity_overrides_race(self):
        """Test recorded Hispanic ethnicity wins over recorded race"""
        record = self.normalize(Race='B', Ethnicity='H')
        self.assertEqual(record.driver_race, Race.HISPANIC)

    def test_unknown_race_string(self):
        """Test unmapped race text becomes Unknown, not Other"""
        audit = Audit()
        record = self.normalize(audit, Race='martian')
        self.assertEqual(record.driver_race, Race.UNKNOWN)
        self.assertEqual(audit['driver_race.unmapped'], 1)

    def test_midnight_missing(self):
        """Test 00:00 is treated as missing when the state says so"""
        schema = StateSchema.from_text(SCHEMA_TEXT + "midnight_missing = true\n")
        record = normalize_record(raw(StopTime='00:00'), schema, self.tables)
        self.assertIsNone(record.stop_time)
        self.assertEqual(self.normalize(StopTime='00:00').stop_time, 0)

    def test_two_digit_year_rejected(self):
        with self.assertRaises(AmbiguousDateError):
            self.normalize(StopDate='05/02/13')

    def test_alternate_date_format(self):
        self.assertEqual(self.normalize(StopDate='05/02/2013').stop_date, date(2013, 5, 2))

    def test_coded_fields(self):
        """Test vocabularies map onto the standardized codes"""
        record = self.normalize(
            Violation='Speed;Seat Belt', Searched='Y', SearchType='Consent;K9', Contraband='Y',
        )
        self.assertEqual(record.location, Location(LocationKind.COUNTY, '08031'))
        self.assertEqual(record.violations, ('speeding', 'seat-belt'))
        self.assertEqual(record.search_types, (SearchType.CONSENT, SearchType.K9))
        self.assertTrue(record.contraband_found)
        self.assertEqual(record.stop_time, 14 * 60 + 5)
        self.assertEqual(record.driver_gender, Gender.MALE)
        self.assertEqual(record.identifiers, {'officer_id': '17'})

    def test_invariants_hold(self):
        """Test no record escapes with contraband but no search"""
        for searched in ('Y', 'N', ''):
            for contraband in ('Y', 'N', ''):
                record = self.normalize(Searched=searched, Contraband=contraband)
                if record.contraband_found:
                    self.assertTrue(record.search_conducted)

    def test_normalization_idempotent(self):
        """Test normalizing the standardized output changes nothing"""
        records = [
            self.normalize(DOB='1990-05-01'),
            self.normalize(Race='', Gender='', Searched='Y', SearchType='Probable Cause', Contraband='Y',
                           Outcome='Arrest;Citation', LastName='garcia'),
            self.normalize(StopTime='', County='', Violation='', Outcome=''),
        ]
        out = io.StringIO()
        write_standardized(records, out)
        once = read_standardized(out.getvalue(), 'CO')
        self.assertEqual(once, records)

        again = io.StringIO()
        write_standardized(once, again)
        self.assertEqual(again.getvalue(), out.getvalue())


class DedupeTest(SimpleTestCase):
    """Test cases for duplicate reconciliation"""

    key = DedupKey(('officer_id', 'stop_date', 'stop_time'))

    def record(self, line, minute=605, **fields):
        return StopRecord(
            state='CO', stop_date=date(2013, 5, 2), stop_time=minute, source_line=line,
            identifiers={'officer_id': '17'}, **fields,
        )

    def test_identical_keys_merge(self):
        """Test two rows equal on every key field become one"""
        result = dedupe([self.record(2), self.record(3)], self.key)
        self.assertEqual(len(result.records), 1)
        self.assertEqual(result.removed, 1)

    def test_different_minute_kept(self):
        result = dedupe([self.record(2), self.record(3, minute=606)], self.key)
        self.assertEqual(len(result.records), 2)
        self.assertEqual(result.removed, 0)

    def test_contraband_union(self):
        """Test one duplicate carrying contraband makes the merge carry it"""
        rows = [
            self.record(2, search_conducted=False, contraband_found=False),
            self.record(3, search_conducted=True, contraband_found=True),
            self.record(4, search_conducted=False, contraband_found=False),
        ]
        result = dedupe(rows, self.key)
        self.assertEqual(len(result.records), 1)
        self.assertTrue(result.records[0].contraband_found)
        self.assertTrue(result.records[0].search_conducted)
        self.assertEqual(result.removed, 2)

    def test_first_non_missing_by_source_order(self):
        """Test scalars come from the earliest line that has them"""
        rows = [
            self.record(9, driver_age=40, driver_race=Race.BLACK),
            self.record(4, driver_race=Race.UNKNOWN, violations=('speeding',)),
            self.record(5, driver_age=31, violations=('seat-belt', 'speeding'), outcome=Outcome.ARREST),
        ]
        merged = dedupe(rows, self.key).records[0]
        self.assertEqual(merged.driver_age, 31)
        self.assertEqual(merged.driver_race, Race.BLACK)
        self.assertEqual(merged.violations, ('speeding', 'seat-belt'))
        self.assertEqual(merged.outcome, Outcome.ARREST)
        self.assertEqual(merged.source_line, 4)

    def test_duplicate_free_identity(self):
        rows = [self.record(i, minute=600 + i) for i in range(5)]
        result = dedupe(rows, self.key)
        self.assertEqual(result.records, rows)

    def test_missing_key_never_merged(self):
        """Test rows missing a key field are kept apart"""
        rows = [self.record(2), self.record(3)]
        for row in rows:
            row.identifiers['officer_id'] = ''
        self.assertEqual(len(dedupe(rows, self.key).records), 2)


class SurnameTest(SimpleTestCase):
    """Test cases for surname reclassification"""

    def setUp(self):
        self.surnames = load_surnames(
            "name,rank,pcthispanic\nGARCIA,8,92.03\nLOPEZ,12,(S)\nMOREIRA,900,60.00\n"
        )

    def stop(self, surname, race=Race.WHITE, state='TX'):
        return StopRecord(state=state, driver_race=race, driver_surname=surname)

    def test_clean_surname(self):
        self.assertEqual(clean_surname('GARCIA JR.'), 'GARCIA')
        self.assertEqual(clean_surname('Smith II'), 'SMITH')
        self.assertEqual(clean_surname('de la Fuente'), 'FUENTE')
        self.assertIsNone(clean_surname(''))

    def test_suppressed_rows_skipped(self):
        self.assertEqual(set(self.surnames), {'GARCIA', 'MOREIRA'})
        self.assertAlmostEqual(self.surnames['GARCIA'].pct_hispanic, 0.9203)

    def test_relabels_white_hispanic_surname(self):
        """Test GARCIA JR. recorded White in TX becomes Hispanic"""
        records, count = reclassify_hispanic([self.stop('GARCIA JR.')], self.surnames, {'TX'})
        self.assertEqual(records[0].driver_race, Race.HISPANIC)
        self.assertEqual(count, 1)

    def test_missing_race_relabeled(self):
        records, _ = reclassify_hispanic([self.stop('GARCIA', Race.UNKNOWN)], self.surnames, {'TX'})
        self.assertEqual(records[0].driver_race, Race.HISPANIC)

    def test_black_driver_unchanged(self):
        records, count = reclassify_hispanic([self.stop('GARCIA', Race.BLACK)], self.surnames, {'TX'})
        self.assertEqual(records[0].driver_race, Race.BLACK)
        self.assertEqual(count, 0)

    def test_below_cutoff_unchanged(self):
        records, _ = reclassify_hispanic([self.stop('MOREIRA')], self.surnames, {'TX'})
        self.assertEqual(records[0].driver_race, Race.WHITE)

    def test_other_states_unchanged(self):
        records, _ = reclassify_hispanic([self.stop('GARCIA', state='CO')], self.surnames, {'TX'})
        self.assertEqual(records[0].driver_race, Race.WHITE)

    def test_missing_table_raises(self):
        with self.assertRaises(SurnameTableMissing):
            reclassify_hispanic([self.stop('GARCIA')], None, {'TX'})
        records, count = reclassify_hispanic([self.stop('GARCIA')], None, set())
        self.assertEqual(count, 0)


class FilterAnalysisSetTest(SimpleTestCase):
    """Test cases for the analysis window"""

    def test_window_and_races(self):
        records = [
            StopRecord(state='CO', stop_date=date(2010, 12, 31), driver_race=Race.WHITE),
            StopRecord(state='CO', stop_date=date(2011, 1, 1), driver_race=Race.HISPANIC),
            StopRecord(state='CO', stop_date=date(2013, 6, 1), driver_race=Race.ASIAN),
            StopRecord(state='CO', stop_date=date(2015, 12, 31), driver_race=Race.BLACK),
            StopRecord(state='CO', stop_date=None, driver_race=Race.BLACK),
        ]
        kept = filter_analysis_set(records)
        self.assertEqual([r.stop_date.year for r in kept], [2011, 2015])


class NormalizeStateTest(SimpleTestCase):
    """Test cases for the per-state pipeline"""

    def setUp(self):
        self.schema = StateSchema.from_text(SCHEMA_TEXT)
        self.data = to_csv([
            stop_row(StopTime='08:00'),
            stop_row(StopTime='09:00', Race='B'),
            stop_row(StopTime='10:00', LastName='Garcia'),
            stop_row(StopTime='11:00', Age='112'),
            stop_row(StopTime='12:00', Searched='N'),
            stop_row(StopTime='12:00', Searched='Y', Contraband='Y'),
            ['17', '2013-05-02'],
            stop_row(StopDate='05/02/13'),
        ])

    def test_audit_conservation(self):
        """Test input = output + error sink + duplicates removed"""
        records, report, sink = normalize_state(io.BytesIO(self.data), self.schema)
        self.assertEqual(report.input_rows, 8)
        self.assertEqual(report.parse_errors, 1)
        self.assertEqual(report.rejected, 1)
        self.assertEqual(report.duplicates_removed, 1)
        self.assertEqual(report.output_rows, 5)
        self.assertEqual(len(records), 5)
        self.assertEqual(len(sink), 2)
        self.assertTrue(report.conserved)
        self.assertTrue(records[4].contraband_found)

        payload = json.loads(json.dumps(report.to_dict()))
        self.assertEqual(payload['rules']['driver_age.out_of_range'], 1)
        self.assertAlmostEqual(payload['error_rate'], 0.25)

    def test_surname_states(self):
        surnames = load_surnames("name,pcthispanic\nGARCIA,92.0\n")
        schema = StateSchema.from_text(SCHEMA_TEXT.replace('state = CO', 'state = TX'))
        records, report, _ = normalize_state(
            io.BytesIO(self.data), schema, surnames=surnames, surname_states=('TX',),
        )
        self.assertEqual(report.relabeled_hispanic, 1)
        self.assertEqual(sum(r.driver_race == Race.HISPANIC for r in records), 1)

    def test_availability(self):
        """Test field shares against the availability cutoff"""
        records, _, _ = normalize_state(io.BytesIO(self.data), self.schema)
        report = availability_report(records)
        self.assertEqual(report['CO']['driver_age']['share'], 0.0)
        self.assertFalse(report['CO']['driver_age']['available'])
        self.assertTrue(report['CO']['search_conducted']['available'])
        self.assertEqual(available_states(report, ['search_conducted', 'outcome']), ['CO'])
        self.assertEqual(available_states(report, ['driver_age']), [])

    def test_frame(self):
        """Test derived grouping columns"""
        records = [
            StopRecord(state='CO', stop_date=date(2013, 5, 2), stop_time=14 * 60 + 5, driver_race=Race.BLACK,
                       driver_age=23, location=Location(LocationKind.COUNTY, '08031')),
            StopRecord(state='CO', stop_date=date(2012, 1, 9), driver_age=15, driver_race=Race.WHITE),
        ]
        frame = records_to_frame(records)
        self.assertEqual(list(frame['quarter']), ['2013Q2', '2012Q1'])
        self.assertEqual(frame.loc[0, 'hour_bin'], '12-15')
        self.assertEqual(frame.loc[0, 'age_bin'], '20-29')
        self.assertIsNone(frame.loc[1, 'age_bin'])
        self.assertEqual(frame.loc[0, 'location'], 'county:08031')
        self.assertEqual(frame.loc[0, 'weekday'], 'Thu')


class ReferenceTablesTest(SimpleTestCase):
    """Test cases for reference lookups and their cache"""

    def setUp(self):
        cache.clear()
        handle = tempfile.NamedTemporaryFile('w', suffix='.csv', delete=False)
        handle.write(
            "kind,state,raw,value\n"
            "location,NC,Raleigh PD,D4\n"
            "district_county,NC,D4,37183\n"
            "district_county,NC,D4,37101\n"
            "race,CO,Anglo,White\n"
        )
        handle.close()
        self.path = handle.name

    def tearDown(self):
        os.unlink(self.path)

    def test_extended_lookups(self):
        tables, digest = get_reference_tables(self.path)
        self.assertEqual(tables.locations[('NC', 'raleigh pd')], 'D4')
        self.assertEqual(tables.counties_for('NC', 'D4'), ('37183', '37101'))
        self.assertEqual(tables.race['anglo'], Race.WHITE)
        self.assertEqual(len(digest), 40)

    def test_second_load_hits_cache(self):
        """Test the second load is served from the cache"""
        get_reference_tables(self.path)
        with patch('records.utils.ReferenceTables') as mock_tables:
            tables, _ = get_reference_tables(self.path)
            mock_tables.assert_not_called()
        self.assertEqual(tables.locations[('NC', 'raleigh pd')], 'D4')

    def test_bad_kind(self):
        with self.assertRaises(SchemaError):
            ReferenceTables().extend_from_csv("kind,state,raw,value\nshoe,CO,x,y\n")
