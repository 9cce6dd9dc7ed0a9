import json
import os
import shutil
import tempfile
from unittest import skipUnless

import numpy as np
from django.test import SimpleTestCase

from numerics.random import make_generator
from numerics.special import beta_tail_rates
from records.pipeline import read_standardized

from .config import SynthConfig
from .exceptions import SynthError
from .generators import draw_group, gen_binary, gen_counts, gen_threshold, write_bundle

SLOW = os.environ.get('TRAFFIC_STOPS_SLOW_TESTS') == '1'


def one_group(**changes):
    """Single-race, single-location config with no location spread."""
    values = dict(
        races=('White',), locations=1, stops_per_group=1000,
        threshold_phi=(0.3,), threshold_lam=(5.0,), threshold_t=(0.2,),
        phi_sd=0.0, lam_sd=0.0, threshold_sd=0.0,
        phi_post=(0.0,), lam_post=(0.0,), threshold_post=(0.0,),
    )
    values.update(changes)
    return SynthConfig(**values)


def null_binary(**changes):
    values = dict(binary_intercept=0.0, binary_effects={}, time_trend=0.0, state_sd=0.0, stops_per_group=5000)
    values.update(changes)
    return SynthConfig(**values)


class ConfigTest(SimpleTestCase):
    """Test cases for synthetic-data configuration"""

    def test_rejects_out_of_domain(self):
        """Test parameters outside the model domains are refused"""
        with self.assertRaises(SynthError):
            SynthConfig(threshold_phi=(0.1, 1.2, 0.1))
        with self.assertRaises(SynthError):
            SynthConfig(threshold_t=(0.1, 0.2))
        with self.assertRaises(SynthError):
            SynthConfig(count_phi=0.0)
        with self.assertRaises(SynthError):
            SynthConfig(control_states=('CO',))
        with self.assertRaises(SynthError):
            SynthConfig(periods=('post',))

    def test_to_dict(self):
        """Test dates serialize as ISO strings"""
        payload = SynthConfig().to_dict()
        self.assertEqual(payload['legalization_date'], '2012-12-31')
        json.dumps(payload)


class ThresholdGeneratorTest(SimpleTestCase):
    """Test cases for count tables from the threshold process"""

    def test_boundary_thresholds(self):
        """Test a zero threshold searches everyone and a unit threshold no one"""
        data, _ = gen_threshold(one_group(threshold_t=(0.0,)))
        self.assertEqual(int(data.searches[0]), 1000)
        data, _ = gen_threshold(one_group(threshold_t=(1.0,)))
        self.assertEqual(int(data.searches[0]), 0)
        self.assertEqual(int(data.hits[0]), 0)

    def test_rates_match_analytic_moments(self):
        """Test empirical search and hit rates against the beta tail moments"""
        n = 1_000_000
        searches, hits = draw_group(make_generator(404), 0.3, 5.0, 0.2, n)
        search_rate, hit_rate, _ = beta_tail_rates(0.3, 5.0, 0.2)
        search_rate, hit_rate = float(search_rate), float(hit_rate)
        self.assertLess(abs(searches / n - search_rate), 3 * np.sqrt(search_rate * (1 - search_rate) / n))
        self.assertLess(abs(hits / searches - hit_rate), 3 * np.sqrt(hit_rate * (1 - hit_rate) / searches))

    def test_truth_and_reproducibility(self):
        """Test fixed seeds reproduce data and truth exactly"""
        config = SynthConfig(seed=5, locations=4, stops_per_group=500)
        data, truth = gen_threshold(config)
        again, truth_again = gen_threshold(config, workers=4)
        np.testing.assert_array_equal(data.searches, again.searches)
        np.testing.assert_array_equal(data.hits, again.hits)
        self.assertEqual(truth, truth_again)
        self.assertEqual(data.n_groups, 12)
        self.assertEqual(set(truth['aggregate_thresholds']), {'White', 'Black', 'Hispanic'})
        white = [g['threshold'] for g in truth['groups'] if g['race'] == 'White']
        self.assertAlmostEqual(truth['aggregate_thresholds']['White'], float(np.mean(white)))
        other, _ = gen_threshold(config.with_changes(seed=6))
        self.assertFalse(np.array_equal(data.searches, other.searches))

    def test_post_period_shift(self):
        """Test post-period thresholds move on the logit scale"""
        config = one_group(periods=('pre', 'post'), threshold_post=(np.log(0.5),), locations=2)
        data, truth = gen_threshold(config)
        self.assertTrue(data.has_post)
        pre = truth['aggregate_thresholds']['White']
        post = truth['aggregate_thresholds_post']['White']
        self.assertAlmostEqual(pre, 0.2)
        # odds halve: 0.25 -> 0.125
        self.assertAlmostEqual(post / (1 - post), 0.125)


class CountGeneratorTest(SimpleTestCase):
    """Test cases for NegBin count cells"""

    def test_equal_means_without_effects(self):
        """Test cells share one mean when every coefficient is zero"""
        config = SynthConfig(locations=200, count_effects={}, count_phi=None, population=1000, count_intercept=-4.0)
        cells, truth = gen_counts(config)
        self.assertEqual(truth['family'], 'poisson')
        stops = np.array([c.stops for c in cells], dtype=float)
        expected = 1000 * np.exp(-4.0)
        self.assertLess(abs(stops.mean() - expected), 4 * np.sqrt(expected / stops.size))
        self.assertAlmostEqual(stops.var(ddof=1) / stops.mean(), 1.0, delta=0.1)
        self.assertTrue(all(c.benchmark_pop == 1000.0 for c in cells))

    def test_negbin_variance(self):
        """Test variance over mean is 1 + mean / phi"""
        config = SynthConfig(locations=1700, count_effects={}, count_phi=4.0, population=1000,
                             count_intercept=np.log(0.02))
        cells, truth = gen_counts(config)
        self.assertGreater(len(cells), 100_000)
        self.assertEqual(truth['dispersion'], 4.0)
        stops = np.array([c.stops for c in cells], dtype=float)
        ratio = stops.var(ddof=1) / stops.mean()
        self.assertAlmostEqual(ratio / (1 + stops.mean() / 4.0), 1.0, delta=0.1)

    def test_effects_applied(self):
        """Test a race effect scales the expected count"""
        config = SynthConfig(locations=300, count_effects={'race[Black]': np.log(2.0)}, count_phi=None,
                             population=2000, count_intercept=np.log(0.01))
        cells, _ = gen_counts(config)
        black = np.mean([c.stops for c in cells if c.race == 'Black'])
        white = np.mean([c.stops for c in cells if c.race == 'White'])
        self.assertAlmostEqual(black / white, 2.0, delta=0.1)


class BinaryGeneratorTest(SimpleTestCase):
    """Test cases for stop records with a logistic search model"""

    def test_balanced_outcomes(self):
        """Test a zero linear predictor searches half the drivers"""
        records, truth = gen_binary(null_binary())
        n = len(records)
        self.assertEqual(n, 4 * 3 * 5000)
        share = sum(r.search_conducted for r in records) / n
        self.assertLess(abs(share - 0.5), 4 * np.sqrt(0.25 / n))
        self.assertEqual(truth['coefficients']['race[White]:Z'], 0.0)
        self.assertTrue(all(r.contraband_found is None for r in records if not r.search_conducted))

    def test_odds_ratio(self):
        """Test a race coefficient of ln 2 doubles the odds"""
        records, _ = gen_binary(null_binary(binary_effects={'race[Black]': np.log(2.0)}))
        counts = {}
        for race in ('White', 'Black'):
            flags = [r.search_conducted for r in records if r.driver_race.value == race]
            counts[race] = (sum(flags), len(flags) - sum(flags))
        (a, b), (c, d) = counts['Black'], counts['White']
        log_or = np.log(a * d / (b * c))
        se = np.sqrt(1 / a + 1 / b + 1 / c + 1 / d)
        self.assertLess(abs(log_or - np.log(2.0)), 3 * se)

    def test_treatment_window(self):
        """Test treated stops only follow legalization in treated states"""
        config = null_binary(stops_per_group=300, treatment_effects={'White': -1.0, 'Black': -1.0, 'Hispanic': -1.0})
        records, truth = gen_binary(config)
        self.assertEqual(truth['coefficients']['race[Black]:Z'], -1.0)
        self.assertEqual(sorted({r.state for r in records}), ['AZ', 'CO', 'MT', 'WA'])
        self.assertTrue(all(config.date_range[0] <= r.stop_date <= config.date_range[1] for r in records))


class BundleTest(SimpleTestCase):
    """Test cases for the synthetic bundle on disk"""

    def setUp(self):
        self.directory = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, self.directory)

    def test_bundle_reproducible(self):
        """Test every file is written and identical across runs"""
        config = SynthConfig(seed=9, locations=3, stops_per_group=200)
        first = write_bundle(config, os.path.join(self.directory, 'a'))
        second = write_bundle(config, os.path.join(self.directory, 'b'))
        names = [os.path.basename(p) for p in first]
        self.assertIn('truth.json', names)
        self.assertIn('records_CO.csv', names)
        for one, two in zip(first, second):
            with open(one, 'rb') as left, open(two, 'rb') as right:
                self.assertEqual(left.read(), right.read(), os.path.basename(one))

        with open(first[names.index('truth.json')], encoding='utf-8') as handle:
            truth = json.load(handle)
        self.assertEqual(set(truth), {'config', 'threshold', 'counts', 'binary'})
        with open(first[names.index('records_WA.csv')], 'rb') as handle:
            records = read_standardized(handle, 'WA')
        self.assertEqual(len(records), 3 * 200)


@skipUnless(SLOW, "set TRAFFIC_STOPS_SLOW_TESTS=1 for million-stop moment checks")
class LargeSampleTest(SimpleTestCase):
    """Law-of-large-numbers checks at a million stops"""

    def test_odds_ratio_million(self):
        config = null_binary(
            binary_effects={'race[Black]': np.log(2.0)}, stops_per_group=125_000, races=('White', 'Black'),
            threshold_phi=(0.1, 0.1), threshold_lam=(8.0, 8.0), threshold_t=(0.2, 0.2),
            phi_post=(0.0, 0.0), lam_post=(0.0, 0.0), threshold_post=(0.0, 0.0),
        )
        records, _ = gen_binary(config)
        flags = {race: [r.search_conducted for r in records if r.driver_race.value == race]
                 for race in ('White', 'Black')}
        odds = {race: np.mean(v) / (1 - np.mean(v)) for race, v in flags.items()}
        self.assertAlmostEqual(odds['Black'] / odds['White'], 2.0, delta=0.03)
