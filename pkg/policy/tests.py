from datetime import date, timedelta

import pandas as pd
from django.test import SimpleTestCase

from records.pipeline import records_to_frame
from records.types import Gender, Location, LocationKind, Outcome, Race, SearchType, StopRecord
from synth.config import SynthConfig
from synth.generators import gen_binary

from .did import DidSpec, did_fit, did_table, drug_misdemeanor, outcome_frame, treatment_effects, years_since
from .exceptions import EmptyCellError, PolicyError
from .trends import control_panel, innocent_search_delta, legalization_threshold_data, trend_series


def stop(state='CO', day=date(2012, 6, 1), race=Race.WHITE, searched=False, types=None, contraband=None,
         violations=('speeding',), county='00001'):
    if searched and types is None:
        types = (SearchType.PROBABLE_CAUSE,)
    return StopRecord(
        state=state, stop_date=day, stop_time=600,
        location=Location(LocationKind.COUNTY, county),
        driver_race=race, driver_gender=Gender.MALE, driver_age=30, violations=violations,
        search_conducted=searched, search_types=types or (), contraband_found=contraband,
        outcome=Outcome.CITATION,
    )


def monthly(state, months, stops, searches, race=Race.WHITE):
    """``stops`` per month on the 15th, the first ``searches`` of them searched."""
    records = []
    for year, month in months:
        for i in range(stops):
            searched = i < searches
            records.append(stop(state, date(year, month, 15), race, searched, contraband=False if searched else None))
    return records


def months_between(first_year, last_year):
    return [(y, m) for y in range(first_year, last_year + 1) for m in range(1, 13)]


def binary(**changes):
    values = dict(locations=5, stops_per_group=200)
    values.update(changes)
    return SynthConfig(**values)


class DidSpecTest(SimpleTestCase):
    """Test cases for the legalization setup"""

    def test_validation(self):
        with self.assertRaises(PolicyError):
            DidSpec(outcome='arrest')
        with self.assertRaises(PolicyError):
            DidSpec(treated_states=())
        with self.assertRaises(PolicyError):
            DidSpec(treated_states=('CO',), control_states=('CO', 'AZ'))

    def test_from_settings(self):
        spec = DidSpec.from_settings(legalization_date='2014-07-08', treated_states=('WA',))
        self.assertEqual(spec.legalization_date, date(2014, 7, 8))
        self.assertEqual(spec.treated_states, ('WA',))
        self.assertIn('IncidentToArrest', spec.excluded_search_types)
        self.assertEqual(spec.to_dict()['legalization_date'], '2014-07-08')

    def test_years_since(self):
        days = pd.Series(pd.to_datetime(['2012-12-31', '2013-12-31', '2012-07-02']))
        years = years_since(days, date(2012, 12, 31))
        self.assertEqual(years.iloc[0], 0.0)
        self.assertAlmostEqual(years.iloc[1], 365 / 365.25)
        self.assertLess(years.iloc[2], 0)


class OutcomeFrameTest(SimpleTestCase):
    """Test cases for the stops entering the legalization models"""

    def test_procedural_searches_excluded(self):
        records, _ = gen_binary(binary())
        searched = [i for i, r in enumerate(records) if r.search_conducted][:7]
        for i in searched:
            records[i] = records[i].with_changes(search_types=(SearchType.INCIDENT_TO_ARREST,))
        frame, dropped = outcome_frame(records, DidSpec())
        self.assertEqual(len(frame), len(records) - 7)
        self.assertEqual(dropped, {})
        self.assertEqual(set(frame['Z'].unique()), {0.0, 1.0})
        exposed = frame[frame['Z'] == 1.0]
        self.assertTrue(exposed['state'].isin(['CO', 'WA']).all())
        self.assertTrue((exposed['stop_date'] > pd.Timestamp('2012-12-31')).all())

    def test_state_without_search_data_dropped(self):
        records, _ = gen_binary(binary())
        records += [stop('NC', searched=None) for _ in range(50)]
        frame, dropped = outcome_frame(records, DidSpec())
        self.assertEqual(dropped, {'NC': ['search_conducted']})
        self.assertNotIn('NC', set(frame['state']))

    def test_drug_misdemeanor_coding(self):
        records = [
            stop('CO', violations=('drug/possession',)),
            stop('CO', violations=('drug/marijuana-possession',)),
            stop('WA', violations=('drug/possession',)),
            stop('WA', violations=('speeding',)),
        ]
        flags = drug_misdemeanor(records_to_frame(records))
        self.assertEqual(flags.tolist(), [False, True, True, False])


class DidFitTest(SimpleTestCase):
    """Test cases for the difference-in-difference search model"""

    def test_recovers_treatment_effects(self):
        """Test estimates land within three standard errors of the truth"""
        config = SynthConfig(
            binary_intercept=-2.0, stops_per_group=10_000,
            treatment_effects={'White': -1.0, 'Black': -1.0, 'Hispanic': -1.0},
        )
        records, truth = gen_binary(config)
        fit = did_fit(records, DidSpec(treated_states=('CO', 'WA')))
        self.assertTrue(fit.converged)
        for race, (coef, se) in treatment_effects(fit).items():
            self.assertLess(abs(coef + 1.0), 3 * se, race)
        for name in ('t', 'race[Black]', 'race[Hispanic]'):
            self.assertLess(abs(fit.coef(name) - truth['coefficients'][name]), 3 * fit.std_error(name), name)
        self.assertEqual(fit.metadata['treated_states'], ['CO', 'WA'])
        self.assertEqual(fit.metadata['control_states'], ['AZ', 'MT'])
        self.assertEqual(fit.metadata['rows'], len(records))

        terms = [row['term'] for row in did_table(fit)]
        self.assertEqual(terms[:3], ['legalization:White', 'legalization:Black', 'legalization:Hispanic'])
        self.assertIn('time_years', terms)

    def test_null_treatment(self):
        """Test no treatment effect is estimated as zero"""
        records, _ = gen_binary(SynthConfig(binary_intercept=-2.0, stops_per_group=5000))
        fit = did_fit(records, DidSpec())
        for race, (coef, se) in treatment_effects(fit).items():
            self.assertLess(abs(coef), 3 * se, race)

    def test_date_outside_window(self):
        records, _ = gen_binary(binary())
        with self.assertRaises(EmptyCellError):
            did_fit(records, DidSpec(legalization_date=date(2016, 1, 1)))

    def test_race_without_treated_post_stops(self):
        records, _ = gen_binary(binary())
        cutoff = date(2012, 12, 31)
        records = [
            r for r in records
            if not (r.driver_race == Race.HISPANIC and r.state in ('CO', 'WA') and r.stop_date > cutoff)
        ]
        with self.assertRaisesRegex(PolicyError, 'not identified'):
            did_fit(records, DidSpec())


class TrendSeriesTest(SimpleTestCase):
    """Test cases for rates over time with pre/post trend lines"""

    def test_constant_rate(self):
        records = monthly('CO', months_between(2012, 2013), stops=100, searches=10)
        result = trend_series(records, states=('CO',))
        self.assertEqual(len(result.series), 8)
        self.assertEqual(int(result.series['stops'].sum()), len(records))
        self.assertEqual(int(result.series['events'].sum()), 240)
        self.assertEqual(result.series['side'].value_counts().to_dict(), {'pre': 4, 'post': 4})
        for _, line in result.trends.iterrows():
            self.assertAlmostEqual(line['slope'], 0.0)
            self.assertAlmostEqual(line['intercept'], 0.1)

    def test_step_change(self):
        records = (monthly('CO', months_between(2012, 2012), stops=100, searches=10)
                   + monthly('CO', months_between(2013, 2013), stops=100, searches=5))
        result = trend_series(records, states=('CO',), window='month')
        self.assertEqual(len(result.series), 24)
        shifts = result.shifts()
        self.assertEqual(len(shifts), 1)
        self.assertAlmostEqual(shifts['shift'].iloc[0], -0.05)

    def test_procedural_searches_not_counted(self):
        records = monthly('CO', months_between(2012, 2013), stops=10, searches=0)
        records.append(stop('CO', date(2012, 3, 3), searched=True, types=(SearchType.INVENTORY,)))
        result = trend_series(records, states=('CO',))
        self.assertEqual(int(result.series['stops'].sum()), 240)
        self.assertEqual(int(result.series['events'].sum()), 0)

    def test_too_few_windows(self):
        records = monthly('CO', [(2012, 11), (2012, 12), (2013, 1)], stops=10, searches=1)
        result = trend_series(records, states=('CO',))
        self.assertTrue(result.trends.empty)
        self.assertTrue(result.shifts().empty)

    def test_bad_window(self):
        with self.assertRaises(PolicyError):
            trend_series([stop()], window='week')

    def test_control_panel(self):
        months = months_between(2012, 2013)
        records = (monthly('CO', months, 20, 2) + monthly('AZ', months, 20, 4)
                   + monthly('MT', months, 20, 3, race=Race.BLACK))
        result = control_panel(records)
        self.assertEqual(set(result.series['state']), {'AZ', 'MT'})
        self.assertEqual(set(result.series['race']), {'All'})
        rates = result.series.groupby('state')['rate'].mean()
        self.assertAlmostEqual(rates['AZ'], 0.2)
        self.assertAlmostEqual(rates['MT'], 0.15)


class InnocentSearchTest(SimpleTestCase):
    """Test cases for searches that found nothing around legalization"""

    def records(self, pre, post):
        records = [stop('CO', date(2012, 5, 1), searched=True, contraband=False) for _ in range(pre)]
        records += [stop('CO', date(2013, 5, 1), searched=True, contraband=False) for _ in range(post)]
        # hits and procedural searches are not counted
        records += [stop('CO', date(2013, 5, 1), searched=True, contraband=True) for _ in range(5)]
        records += [stop('CO', date(2013, 5, 1), searched=True, contraband=False,
                         types=(SearchType.WARRANT,)) for _ in range(5)]
        records += [stop('CO', date(2013, 5, 1)) for _ in range(50)]
        return records

    def test_halved(self):
        self.assertAlmostEqual(innocent_search_delta(self.records(20, 10)), -0.5)

    def test_unchanged(self):
        self.assertEqual(innocent_search_delta(self.records(8, 8)), 0.0)

    def test_outside_years_ignored(self):
        records = self.records(10, 10)
        records += [stop('CO', date(2010, 5, 1), searched=True, contraband=False) for _ in range(30)]
        self.assertEqual(innocent_search_delta(records), 0.0)

    def test_missing_contraband(self):
        records = [stop('CO', date(2012, 5, 1), searched=True) for _ in range(10)]
        records += [stop('CO', date(2013, 5, 1), searched=True) for _ in range(10)]
        with self.assertRaises(PolicyError):
            innocent_search_delta(records)

    def test_no_searches_before(self):
        with self.assertRaises(PolicyError):
            innocent_search_delta(self.records(0, 10))


class LegalizationThresholdTest(SimpleTestCase):
    """Test cases for the pre/post threshold count table"""

    def test_periods_assigned(self):
        records, _ = gen_binary(binary(locations=4, stops_per_group=500))
        data = legalization_threshold_data(records, 'CO', min_stops=10)
        self.assertTrue(data.has_post)
        self.assertEqual(len(data.locations), 4)
        co = [r for r in records if r.state == 'CO']
        self.assertEqual(int(data.stops.sum()), len(co))

    def test_unknown_state(self):
        records, _ = gen_binary(binary())
        with self.assertRaises(PolicyError):
            legalization_threshold_data(records, 'TX')

    def test_one_day_after(self):
        records = [stop('CO', date(2012, 12, 31) + timedelta(days=d), county=f"{d % 2:05d}") for d in (0, 1)]
        data = legalization_threshold_data(records, 'CO', min_stops=1)
        self.assertEqual(sorted(data.period.tolist()), [0, 1])
