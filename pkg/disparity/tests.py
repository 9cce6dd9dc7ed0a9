from datetime import date, timedelta
from fractions import Fraction

import numpy as np
import pandas as pd
from django.test import SimpleTestCase

from numerics.random import make_generator
from records.pipeline import availability_report, records_to_frame
from records.schemas import ReferenceTables
from records.types import Gender, Location, LocationKind, Outcome, Race, SearchType, StopRecord

from .analysis import (
    DriverType, analysis_battery, outcome_test, poststop_analysis, stop_rate_analysis, two_type_hit_rates,
    typical_driver_table, typical_rates,
)
from .cells import build_cells, cells_to_frame
from .census import read_census, with_districts
from .exceptions import CensusError, DisparityError, NoEligibleStatesError
from .reports import battery_table, hit_rate_points, outcome_test_tables, poststop_rate_points, stop_rate_points

CENSUS_HEADER = 'state,location,race,age_bin,gender,year,population\n'


def census_text(rows):
    return CENSUS_HEADER + ''.join(','.join(str(v) for v in row) + '\n' for row in rows)


def stop(state='CO', county='08001', race=Race.WHITE, gender=Gender.MALE, age=25, day=date(2013, 5, 2),
         minutes=14 * 60, searched=False, types=(), contraband=None, outcome=Outcome.CITATION,
         violations=('speeding',)):
    return StopRecord(
        state=state, stop_date=day, stop_time=minutes,
        location=Location(LocationKind.COUNTY, county) if county else None,
        driver_race=race, driver_gender=gender, driver_age=age, violations=violations,
        search_conducted=searched, search_types=types, contraband_found=contraband, outcome=outcome,
    )


def random_stops(seed, state, n, with_age=True, search_rate=0.08):
    """Stops with no race effect anywhere: every race is searched and cited alike."""
    rng = make_generator(seed)
    races = (Race.WHITE, Race.BLACK, Race.HISPANIC)
    records = []
    for _ in range(n):
        searched = bool(rng.random() < search_rate)
        types, contraband = (), None
        if searched:
            roll = rng.random()
            if roll < 0.4:
                types = (SearchType.CONSENT,)
            elif roll < 0.6:
                types = (SearchType.INCIDENT_TO_ARREST,)
            else:
                types = (SearchType.PROBABLE_CAUSE,)
            contraband = bool(rng.random() < 0.3)
        records.append(stop(
            state=state,
            county=f"{rng.integers(1, 4):05d}",
            race=races[rng.integers(0, 3)],
            gender=(Gender.MALE, Gender.FEMALE)[rng.integers(0, 2)],
            age=int(rng.integers(16, 70)) if with_age else None,
            day=date(2013, 1, 1) + timedelta(days=int(rng.integers(0, 365))),
            minutes=int(rng.integers(0, 24 * 60)),
            searched=searched, types=types, contraband=contraband,
            outcome=(Outcome.CITATION, Outcome.WRITTEN_WARNING, Outcome.ARREST)[rng.choice(3, p=[0.6, 0.35, 0.05])],
            violations=('speeding',) if rng.random() < 0.7 else ('equipment',),
        ))
    return records


def null_cells(seed, locations=6, rate=0.04):
    """Count cells whose stop rate depends on gender and age but not race."""
    rng = make_generator(seed)
    rows = []
    for loc in range(locations):
        for year in (2013, 2014):
            for race in ('White', 'Black', 'Hispanic'):
                for gender, g_effect in (('Female', 0.0), ('Male', 0.4)):
                    for age_bin, a_effect in (('16-19', 0.3), ('20-29', 0.2), ('30-39', 0.0), ('50+', -0.5)):
                        pop = int(rng.integers(1000, 20000))
                        mu = pop * rate * np.exp(g_effect + a_effect + 0.1 * loc)
                        rows.append({
                            'state': 'CO', 'location': f"county:{loc:05d}", 'race': race, 'age_bin': age_bin,
                            'gender': gender, 'year': year, 'stops': int(rng.poisson(mu)), 'benchmark_pop': pop,
                        })
    return pd.DataFrame(rows)


class CensusTest(SimpleTestCase):
    """Test cases for population tables"""

    def test_read(self):
        """Test location tagging and state case"""
        frame = read_census(census_text([('co', '08001', 'White', '20-29', 'Male', 2013, 500)]))
        self.assertEqual(frame.loc[0, 'state'], 'CO')
        self.assertEqual(frame.loc[0, 'location'], 'county:08001')
        self.assertEqual(frame.loc[0, 'population'], 500)

    def test_rejects_bad_tables(self):
        """Test missing columns, negative counts and duplicate strata"""
        with self.assertRaises(CensusError):
            read_census('state,location,race\nCO,08001,White\n')
        with self.assertRaises(CensusError):
            read_census(census_text([('CO', '08001', 'White', '20-29', 'Male', 2013, -1)]))
        duplicate = ('CO', '08001', 'White', '20-29', 'Male', 2013, 5)
        with self.assertRaises(CensusError):
            read_census(census_text([duplicate, duplicate]))

    def test_district_sums(self):
        """Test district strata are the sum of their counties"""
        census = read_census(census_text([
            ('NC', '37001', 'Black', '30-39', 'Female', 2013, 100),
            ('NC', '37003', 'Black', '30-39', 'Female', 2013, 50),
            ('NC', '37005', 'Black', '30-39', 'Female', 2013, 7),
        ]))
        tables = ReferenceTables()
        tables.district_counties = {('NC', 'B1'): ['37001', '37003'], ('NC', 'B2'): ['37005', '37999']}
        with self.assertLogs('disparity.census', 'WARNING') as logs:
            combined = with_districts(census, tables, states=('NC',))
        self.assertIn('37999', logs.output[0])
        districts = combined[combined['location'].str.startswith('district:')].set_index('location')
        self.assertEqual(districts.loc['district:B1', 'population'], 150)
        self.assertEqual(districts.loc['district:B2', 'population'], 7)
        self.assertEqual(len(combined), 5)

    def test_other_states_untouched(self):
        """Test districts outside the district-coded states are skipped"""
        census = read_census(census_text([('IL', '17001', 'White', '20-29', 'Male', 2013, 10)]))
        tables = ReferenceTables()
        tables.district_counties = {('IL', '3'): ['17001']}
        self.assertEqual(len(with_districts(census, tables, states=('NC',))), 1)


class CellsTest(SimpleTestCase):
    """Test cases for count cells and their coverage accounting"""

    def setUp(self):
        rows = []
        for location in ('08001', '08003'):
            for race in ('White', 'Black'):
                for gender in ('Male', 'Female'):
                    for year in (2013, 2014):
                        population = 0 if (race, gender, location) == ('Black', 'Female', '08001') else 400
                        rows.append(('CO', location, race, '20-29', gender, year, population))
        self.census = read_census(census_text(rows))

    def test_counts_and_zero_cells(self):
        """Test stops are counted and unstopped strata kept only where stops occurred"""
        records = [stop(), stop(minutes=9 * 60)]
        cells, coverage = build_cells(records, self.census)
        self.assertEqual(sum(c.stops for c in cells), 2)
        by_key = {(c.race, c.gender): c for c in cells}
        self.assertEqual(by_key[('White', 'Male')].stops, 2)
        self.assertEqual(by_key[('White', 'Male')].benchmark_pop, 400.0)
        self.assertEqual(by_key[('Black', 'Male')].stops, 0)
        # only 08001 and 2013 saw stops; the zero-population stratum is not a cell
        self.assertEqual(len(cells), 3)
        self.assertEqual({c.location for c in cells}, {'county:08001'})
        self.assertEqual({c.year for c in cells}, {2013})
        self.assertTrue(coverage.conserved)

    def test_exclusions_accounted(self):
        """Test every dropped stop lands in one coverage bucket"""
        records = [
            stop(),
            stop(age=None),
            stop(gender=Gender.UNKNOWN),
            stop(county='08005'),
            stop(race=Race.BLACK, gender=Gender.FEMALE),
        ]
        cells, coverage = build_cells(records, self.census)
        self.assertEqual(coverage.analysis_records, 5)
        self.assertEqual(coverage.in_cells, 1)
        self.assertEqual(coverage.incomplete_key, 2)
        self.assertEqual(coverage.no_census, 1)
        self.assertEqual(coverage.missing_locations, ['CO|county:08005'])
        self.assertEqual(coverage.zero_population, 1)
        self.assertTrue(coverage.conserved)
        self.assertTrue(coverage.to_dict()['conserved'])
        self.assertEqual(len(cells_to_frame(cells)), len(cells))


class StopRateTest(SimpleTestCase):
    """Test cases for the benchmarked stop-rate regression"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.cells = null_cells(11)

    def test_null_race_effect(self):
        """Test race coefficients near zero when stops do not depend on race"""
        fit = stop_rate_analysis(self.cells, 'poisson')
        self.assertEqual(fit.covariance_type, 'sandwich')
        for race in ('Black', 'Hispanic'):
            self.assertLess(abs(fit.coef(f"race[{race}]")), 3 * fit.std_error(f"race[{race}]"))
        self.assertAlmostEqual(fit.coef('gender[Male]'), 0.4, delta=0.05)

    def test_quasipoisson_shares_coefficients(self):
        """Test quasi-Poisson only rescales the Poisson covariance"""
        poisson = stop_rate_analysis(self.cells, 'poisson')
        quasi = stop_rate_analysis(self.cells, 'quasipoisson')
        np.testing.assert_allclose(quasi.coefficients, poisson.coefficients, rtol=1e-8, atol=1e-10)
        self.assertEqual(quasi.covariance_type, 'quasi')

    def test_metadata(self):
        """Test stop weights for marginalizing location and year"""
        fit = stop_rate_analysis(self.cells, 'negbin')
        weights = fit.metadata['profile_weights']
        self.assertEqual(set(weights), {'location_key', 'year'})
        self.assertAlmostEqual(sum(weights['year'].values()), float(self.cells['stops'].sum()))
        self.assertIn('CO|county:00000', weights['location_key'])
        self.assertEqual(fit.metadata['cells'], len(self.cells))
        rates = typical_rates(fit)
        self.assertEqual(set(rates), {'White', 'Black', 'Hispanic'})

    def test_empty(self):
        """Test no cells is an analysis error"""
        with self.assertRaises(DisparityError):
            stop_rate_analysis(cells_to_frame([]))


class PostStopTest(SimpleTestCase):
    """Test cases for post-stop logistic regressions"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        # IL records carry no driver age
        cls.records = random_stops(3, 'CO', 3000) + random_stops(4, 'IL', 1500, with_age=False)
        cls.report = availability_report(cls.records)
        cls.frame = records_to_frame(cls.records)

    def test_state_eligibility(self):
        """Test states lacking a control field are dropped and recorded"""
        fit = poststop_analysis(self.records, 'search', 'race, location', report=self.report)
        self.assertEqual(fit.metadata['states'], ['CO', 'IL'])
        with self.assertLogs('disparity.analysis', 'WARNING'):
            fit = poststop_analysis(self.records, 'search', report=self.report)
        self.assertEqual(fit.metadata['states'], ['CO'])
        self.assertEqual(fit.metadata['dropped_states'], {'IL': ['driver_age']})
        self.assertIn('hour_bin', fit.metadata['profile_weights'])

    def test_consent_states(self):
        """Test consent searches only use states recording search type reliably"""
        fit = poststop_analysis(self.records, 'consent_search', 'race', report=self.report)
        self.assertEqual(fit.metadata['states'], ['CO'])
        il_only = [r for r in self.records if r.state == 'IL']
        with self.assertRaises(NoEligibleStatesError):
            poststop_analysis(il_only, 'consent_search', 'race')

    def test_typical_rates_match_proportions(self):
        """Test a race-only model reproduces the raw search proportions"""
        fit = poststop_analysis(self.records, 'search', 'race', report=self.report)
        rates = typical_rates(fit)
        for race, rate in rates.items():
            searched = self.frame.loc[self.frame['race'] == race, 'search_conducted'].astype(bool)
            self.assertAlmostEqual(rate, searched.mean(), places=6)

    def test_incident_to_arrest_excluded(self):
        """Test the robustness variant drops stops with incident-to-arrest searches"""
        incident = int(self.frame['search_types'].map(lambda t: 'IncidentToArrest' in t).sum())
        self.assertGreater(incident, 0)
        base = poststop_analysis(self.records, 'search', 'race', report=self.report)
        robust = poststop_analysis(self.records, 'search', 'race', report=self.report,
                                   exclude_incident_to_arrest=True)
        self.assertEqual(base.metadata['rows'] - robust.metadata['rows'], incident)
        self.assertTrue(robust.metadata['exclude_incident_to_arrest'])

    def test_citation_population(self):
        """Test citations are modelled among speeding stops ending in a citation or warning"""
        fit = poststop_analysis(self.records, 'citation_given_speeding', 'race', report=self.report)
        speeding = self.frame['violations'].map(lambda v: 'speeding' in v)
        eligible = speeding & self.frame['outcome'].isin(['Citation', 'WrittenWarning'])
        self.assertEqual(fit.metadata['rows'], int(eligible.sum()))

    def test_null_race_effect(self):
        """Test arrest coefficients near zero with all controls"""
        fit = poststop_analysis(self.records, 'arrest', 'race, location, time, demo', report=self.report)
        for race in ('Black', 'Hispanic'):
            self.assertLess(abs(fit.coef(f"race[{race}]")), 3 * fit.std_error(f"race[{race}]"))

    def test_unknown_inputs(self):
        """Test unknown outcomes and control specs are rejected"""
        with self.assertRaises(DisparityError):
            poststop_analysis(self.records, 'frisk')
        with self.assertRaises(DisparityError):
            poststop_analysis(self.records, 'search', 'race, weather')


class BatteryTest(SimpleTestCase):
    """Test cases for the regression battery"""

    def test_skips_with_reason(self):
        """Test unsupported combinations are listed, not raised"""
        records = random_stops(5, 'IL', 1200, with_age=False)
        with self.assertLogs('disparity.analysis', 'WARNING'):
            entries = analysis_battery(records, outcomes=('search', 'consent_search'), specs=('race',))
        self.assertEqual(len(entries), 4)
        consent = [e for e in entries if e.outcome == 'consent_search']
        self.assertTrue(all(e.skipped and 'no state carries' in e.skipped for e in consent))
        table = battery_table(entries)
        self.assertEqual(len(table), 4)
        self.assertTrue(table.loc[table['outcome'] == 'consent_search', 'Black'].isna().all())
        self.assertFalse(table.loc[table['outcome'] == 'search', 'Black'].isna().any())

    def test_stop_families_first(self):
        """Test stop-rate entries lead and feed the typical-driver table"""
        records = random_stops(6, 'CO', 1500)
        entries = analysis_battery(records, cells=null_cells(7, locations=3), outcomes=('search',),
                                   specs=('race, location, time, demo',), families=('negbin', 'poisson'),
                                   robustness=False)
        self.assertEqual([e.outcome for e in entries], ['stop', 'stop', 'search'])
        rows = typical_driver_table(entries)
        self.assertEqual([r['outcome'] for r in rows], ['stop', 'search'])
        self.assertTrue(0 < rows[1]['Black'] < 1)


class OutcomeTestTest(SimpleTestCase):
    """Test cases for hit rates"""

    def setUp(self):
        hit = dict(searched=True, contraband=True, types=(SearchType.PROBABLE_CAUSE,))
        miss = dict(searched=True, contraband=False, types=(SearchType.PROBABLE_CAUSE,))
        self.records = (
            [stop(**hit)] * 2 + [stop(**miss)] * 2
            + [stop(race=Race.BLACK, **hit)] + [stop(race=Race.BLACK, **miss)] * 2
            + [stop(race=Race.HISPANIC)]
            + [stop(county='08003', **hit)]
            + [stop(state='MD', county=None, race=Race.BLACK, **hit)] * 2
            + [stop(state='MD', county=None)]
        )

    def test_rows_and_aggregates(self):
        """Test per-location rows and pooled hit rates"""
        result = outcome_test(self.records)
        self.assertEqual(result.states, ['CO', 'MD'])
        self.assertEqual(result.aggregate_only_states, ['MD'])
        self.assertEqual(len(result.rows), 6)
        rows = {(r.location, r.race): r for r in result.rows}
        self.assertEqual(rows[('county:08001', 'White')].hit_rate, 0.5)
        self.assertEqual(rows[('county:08001', 'Black')].hits, 1)
        self.assertTrue(rows[('county:08001', 'Hispanic')].undefined)
        self.assertIsNone(rows[('county:08003', 'Black')].hit_rate)
        self.assertEqual(result.aggregate['White'], (5, 3))
        self.assertEqual(result.aggregate['Black'], (5, 3))
        self.assertEqual(result.aggregate_rate('White'), float(Fraction(3, 5)))
        self.assertIsNone(result.aggregate_rate('Hispanic'))

    def test_location_states(self):
        """Test restricting the per-location breakdown"""
        result = outcome_test(self.records, location_states=['MD'])
        self.assertEqual(result.rows, [])
        self.assertEqual(result.aggregate_only_states, ['CO', 'MD'])
        self.assertEqual(result.aggregate['Black'], (5, 3))

    def test_tables_and_points(self):
        """Test outcome tables and hit-rate scatter points"""
        result = outcome_test(self.records)
        rows, aggregate = outcome_test_tables(result)
        self.assertEqual(len(rows), 6)
        self.assertEqual(list(aggregate['race']), ['White', 'Black', 'Hispanic'])
        points = hit_rate_points(result, min_searches=0)
        # Hispanic rate is undefined at 08001; 08003 has no Black searches
        self.assertEqual(len(points), 1)
        self.assertEqual(points.loc[0, 'race'], 'Black')
        self.assertAlmostEqual(points.loc[0, 'minority_rate'], 1 / 3)
        self.assertEqual(points.loc[0, 'stops'], 7)

    def test_no_contraband_data(self):
        """Test states without contraband data cannot enter the test"""
        records = [stop(state='TX', searched=True, contraband=None)] * 3
        with self.assertRaises(NoEligibleStatesError):
            outcome_test(records)


class TwoTypeTest(SimpleTestCase):
    """Test cases for the two-type hit rate illustration"""

    def test_infra_marginality(self):
        """Test a lower threshold can lower the hit rate"""
        types = [DriverType(0.5, 0.75), DriverType(0.5, 0.25)]
        self.assertEqual(two_type_hit_rates(types, 0.5), (0.5, 0.75))
        self.assertEqual(two_type_hit_rates([(0.5, 0.75), (0.5, 0.25)], 0.2), (1.0, 0.5))
        self.assertEqual(two_type_hit_rates(types, 0.9), (0.0, None))

    def test_shares_sum_to_one(self):
        """Test type shares are validated"""
        with self.assertRaises(DisparityError):
            two_type_hit_rates([(0.5, 0.75), (0.3, 0.25)], 0.5)


class ReportTest(SimpleTestCase):
    """Test cases for plot-ready scatter tables"""

    def test_stop_rate_points(self):
        """Test stop rates pair each minority group with white drivers at the location"""
        cells = pd.DataFrame([
            ('CO', 'county:08001', 'White', '20-29', 'Male', 2013, 6, 60.0),
            ('CO', 'county:08001', 'White', '30-39', 'Male', 2013, 4, 40.0),
            ('CO', 'county:08001', 'Black', '20-29', 'Male', 2013, 5, 20.0),
            ('CO', 'county:08003', 'Black', '20-29', 'Male', 2013, 5, 20.0),
        ], columns=['state', 'location', 'race', 'age_bin', 'gender', 'year', 'stops', 'benchmark_pop'])
        points = stop_rate_points(cells, min_stops=0)
        self.assertEqual(len(points), 1)
        self.assertAlmostEqual(points.loc[0, 'base_rate'], 0.1)
        self.assertAlmostEqual(points.loc[0, 'minority_rate'], 0.25)
        self.assertEqual(points.loc[0, 'stops'], 15)
        self.assertTrue(stop_rate_points(cells, min_stops=20).empty)

    def test_poststop_points(self):
        """Test search and arrest rate points"""
        records = ([stop(), stop(searched=True, types=(SearchType.CONSENT,), contraband=False)]
                   + [stop(race=Race.BLACK, outcome=Outcome.ARREST)] * 2 + [stop(race=Race.BLACK)] * 2)
        search = poststop_rate_points(records, 'search', min_stops=0)
        self.assertAlmostEqual(search.loc[0, 'base_rate'], 0.5)
        self.assertAlmostEqual(search.loc[0, 'minority_rate'], 0.0)
        arrest = poststop_rate_points(records, 'arrest', min_stops=0)
        self.assertAlmostEqual(arrest.loc[0, 'minority_rate'], 0.5)
        with self.assertRaises(ValueError):
            poststop_rate_points(records, 'frisk')
