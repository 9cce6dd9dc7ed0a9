import os
import shutil
import tempfile
import warnings
from unittest import skipUnless
from unittest.mock import patch

import numpy as np
import pandas as pd
from django.test import SimpleTestCase
from scipy import stats
from scipy.special import logit

from glm.exceptions import ConvergenceWarning
from inference.model import check_gradient
from inference.nuts import SamplerConfig
from numerics.random import make_generator
from numerics.special import beta_tail_rates
from synth.config import SynthConfig
from synth.generators import gen_threshold

from .data import ThresholdData, prepare
from .exceptions import DegenerateHierarchyError, NonFiniteLikelihoodError, SparsityWarning, ThresholdError
from .fitting import ThresholdFit, aggregate_thresholds, fit, fit_prepost, ppc, prepost_summary
from .model import ThresholdModel, group_log_likelihood
from .reports import threshold_scatter, write_fit_outputs

SLOW = os.environ.get('TRAFFIC_STOPS_SLOW_TESTS') == '1'
TINY = SamplerConfig(chains=2, warmup=150, draws=100, max_depth=6)


def count_table(rows):
    return ThresholdData.from_frame(pd.DataFrame(rows, columns=['race', 'location', 'period', 'stops', 'searches', 'hits']))


def simulate_counts(truth, stops, seed, periods=('pre',)):
    """
    Counts drawn from the model: searches ~ Binomial(stops, S) and
    hits ~ Binomial(searches, H) for each (race, location, period).
    ``truth`` maps (race, location, period) to (phi, lam, t).
    """
    rng = make_generator(seed)
    rows = []
    for (race, location, period), (phi, lam, t) in sorted(truth.items()):
        if period not in periods:
            continue
        search_rate, hit_rate, _ = beta_tail_rates(phi, lam, t)
        s = int(rng.binomial(stops, search_rate))
        h = int(rng.binomial(s, hit_rate))
        rows.append((race, location, period, stops, s, h))
    return count_table(rows)


def small_truth(locations=4, drop=0.0):
    truth = {}
    for i in range(locations):
        loc = f"L{i:02d}"
        for race, phi, t in (('White', 0.10, 0.20), ('Black', 0.15, 0.15)):
            phi_d = phi * (1.0 + 0.1 * i)
            truth[(race, loc, 'pre')] = (phi_d, 8.0, t)
            truth[(race, loc, 'post')] = (phi_d, 8.0, t - drop)
    return truth


def stop_frame(location_stops, searched_share=0.1):
    rows = []
    for location, count in location_stops.items():
        for i in range(count):
            race = 'White' if i % 2 == 0 else 'Black'
            searched = (i // 2) % int(1 / searched_share) == 0
            rows.append((race, location, searched, searched and i % 3 == 0))
    return pd.DataFrame(rows, columns=['race', 'location', 'search_conducted', 'contraband_found'])


class PrepareTest(SimpleTestCase):
    """Test cases for aggregating stops into the count table"""

    def test_location_below_minimum_dropped(self):
        data = prepare(stop_frame({'A': 1000, 'B': 1200, 'C': 999}))
        self.assertEqual(data.locations, ('A', 'B'))
        self.assertEqual(int(data.stops.sum()), 2200)

    def test_keeps_locations_with_most_stops(self):
        frame = stop_frame({f"D{i:03d}": 10 + i for i in range(120)})
        with warnings.catch_warnings():
            warnings.simplefilter('ignore', SparsityWarning)
            data = prepare(frame, min_stops=10)
        self.assertEqual(len(data.locations), 100)
        self.assertNotIn('D019', data.locations)
        self.assertIn('D020', data.locations)

    def test_counts_aggregated(self):
        data = prepare(stop_frame({'A': 1000, 'B': 1000}))
        frame = data.to_frame().set_index(['race', 'location'])
        self.assertEqual(frame.loc[('White', 'A'), 'stops'], 500)
        self.assertTrue((data.hits <= data.searches).all())
        self.assertTrue((data.searches <= data.stops).all())

    def test_single_location_rejected(self):
        with self.assertRaises(DegenerateHierarchyError):
            prepare(stop_frame({'A': 5000, 'B': 10}))

    def test_sparse_minority_searches_warn(self):
        frame = stop_frame({'A': 1000, 'B': 1000})
        black = frame['race'] == 'Black'
        frame.loc[black, 'search_conducted'] = False
        frame.loc[black, 'contraband_found'] = False
        with self.assertWarns(SparsityWarning):
            data = prepare(frame)
        self.assertIn('sparse:Black', data.flags)

    def test_count_validation(self):
        with self.assertRaises(ThresholdError):
            count_table([('White', 'A', 'pre', 10, 4, 5)])
        with self.assertRaises(ThresholdError):
            count_table([('White', 'A', 'pre', 10, 4, 1), ('White', 'A', 'pre', 10, 4, 1)])

    def test_csv_round_trip(self):
        data = simulate_counts(small_truth(), 500, seed=3, periods=('pre', 'post'))
        directory = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, directory)
        path = os.path.join(directory, 'counts.csv')
        data.write_csv(path)
        again = ThresholdData.read_csv(path)
        pd.testing.assert_frame_equal(again.to_frame(), data.to_frame())


class LikelihoodTest(SimpleTestCase):
    """Test cases for the per-group likelihood and the log posterior"""

    def test_zero_threshold_requires_all_searched(self):
        values = group_log_likelihood([100, 100], [100, 60], [30, 20], 0.3, 5.0, 0.0)
        self.assertTrue(np.isfinite(values[0]))
        self.assertEqual(values[1], -np.inf)
        # with every stop searched only the hit binomial remains
        self.assertAlmostEqual(values[0], 30 * np.log(0.3) + 70 * np.log(0.7), places=10)

    def test_matches_two_binomials(self):
        n, s, h = 1000, 420, 150
        search_rate, hit_rate, _ = beta_tail_rates(0.3, 5.0, 0.2)
        expected = stats.binom.logpmf(s, n, search_rate) + stats.binom.logpmf(h, s, hit_rate)
        value = group_log_likelihood(n, s, h, 0.3, 5.0, 0.2, normalized=True)
        self.assertAlmostEqual(float(value), expected, places=8)

    def test_simulation_oracle(self):
        """Test the likelihood against rates simulated from the generative process"""
        phi, lam, t, n = 0.3, 5.0, 0.2, 1000
        draws = 2_000_000
        rng = make_generator(11)
        signal = rng.beta(phi * lam, (1 - phi) * lam, draws)
        searched = signal >= t
        hits = rng.random(draws) < signal
        search_mc = searched.mean()
        hit_mc = hits[searched].mean()
        se_search = np.sqrt(search_mc * (1 - search_mc) / draws)
        se_hit = np.sqrt(hit_mc * (1 - hit_mc) / searched.sum())

        s = int(round(n * search_mc)) - 15
        h = int(round(s * hit_mc)) + 10
        simulated = stats.binom.logpmf(s, n, search_mc) + stats.binom.logpmf(h, s, hit_mc)
        slope_search = s / search_mc - (n - s) / (1 - search_mc)
        slope_hit = h / hit_mc - (s - h) / (1 - hit_mc)
        tolerance = 4.0 * (abs(slope_search) * se_search + abs(slope_hit) * se_hit)
        value = float(group_log_likelihood(n, s, h, phi, lam, t, normalized=True))
        self.assertLess(abs(value - simulated), tolerance)

    def test_label_swap_symmetry(self):
        rows = []
        for loc, (n, s, h) in {'A': (400, 60, 20), 'B': (700, 90, 40), 'C': (300, 20, 5)}.items():
            rows += [('White', loc, 'pre', n, s, h), ('Black', loc, 'pre', n, s, h)]
        data = count_table(rows)
        model = ThresholdModel(data)
        rng = make_generator(5)
        theta = model.density().constrain(rng.normal(0.0, 0.7, model.dimension))
        swapped = theta.copy()
        lay = model.layout
        for name in ('phi_race', 'lam_race', 'threshold_mean'):
            swapped[lay[name]] = theta[lay[name]][::-1]
        cells = theta[lay['z_threshold']].reshape(2, 3)
        swapped[lay['z_threshold']] = cells[::-1].reshape(-1)
        self.assertAlmostEqual(model.log_posterior(theta)[0], model.log_posterior(swapped)[0], places=9)

    def test_gradient_matches_finite_differences(self):
        data = simulate_counts(small_truth(locations=3, drop=0.03), 300, seed=8, periods=('pre', 'post'))
        model = ThresholdModel(data)
        worst = check_gradient(model.density(), make_generator(21), points=20, rtol=1e-5, radius=1.0)
        self.assertLessEqual(worst, 1e-5)

    def test_hit_rate_exceeds_threshold(self):
        data = simulate_counts(small_truth(), 500, seed=4)
        model = ThresholdModel(data)
        rng = make_generator(9)
        theta = model.density().constrain(rng.normal(0.0, 0.5, (200, model.dimension)))
        phi, lam, t = model.group_parameters(theta)
        _, hit_rate, degenerate = beta_tail_rates(phi, lam, t)
        self.assertTrue(np.all(hit_rate[~degenerate] >= t[~degenerate] - 1e-9))

    def test_strict_mode_names_groups(self):
        data = count_table([('White', 'A', 'pre', 100, 60, 20), ('White', 'B', 'pre', 100, 100, 20)])
        model = ThresholdModel(data)
        params = model.unpack(np.zeros(model.dimension))
        params.sigma_phi = params.sigma_lam = 1.0
        params.tau = 1.0
        params.threshold_mean = np.array([-800.0])
        with self.assertRaises(NonFiniteLikelihoodError) as caught:
            model.log_posterior(params, strict=True)
        self.assertEqual(caught.exception.groups, ['White|A|pre'])

    def test_static_model_nested_in_prepost(self):
        data = simulate_counts(small_truth(drop=0.05), 500, seed=6, periods=('pre', 'post'))
        static = ThresholdModel(data.pre_only())
        extended = ThresholdModel(data)
        rng = make_generator(2)
        theta = extended.density().constrain(rng.normal(0.0, 0.5, extended.dimension))
        for name in ('phi_post', 'lam_post', 'threshold_post'):
            theta[extended.layout[name]] = 0.0
        reduced = theta[:static.dimension]
        pre = data.period == 0
        np.testing.assert_allclose(
            np.stack(extended.group_parameters(theta))[:, pre], np.stack(static.group_parameters(reduced)), rtol=1e-14,
        )
        np.testing.assert_allclose(extended.cell_thresholds(theta, 'post'), static.cell_thresholds(reduced), rtol=1e-14)


class AggregateTest(SimpleTestCase):
    """Test cases for stop-weighted aggregate thresholds"""

    def test_weighted_average(self):
        data = count_table([('White', 'A', 'pre', 900, 90, 30), ('White', 'B', 'pre', 100, 10, 3)])
        result = aggregate_thresholds(np.array([[0.10, 0.30]]), data)
        self.assertAlmostEqual(result['White'].mean, 0.12, places=12)

    def test_weights_pool_races(self):
        data = count_table([
            ('White', 'A', 'pre', 100, 10, 3), ('Black', 'A', 'pre', 800, 80, 20),
            ('White', 'B', 'pre', 100, 10, 3), ('Black', 'B', 'pre', 1, 0, 0),
        ])
        # cells are ordered by race then location
        result = aggregate_thresholds(np.array([[0.10, 0.30, 0.20, 0.40]]), data)
        self.assertAlmostEqual(result['White'].mean, (900 * 0.10 + 101 * 0.30) / 1001, places=12)

    def test_single_location(self):
        data = count_table([('White', 'A', 'pre', 900, 90, 30)])
        draws = make_generator(1).uniform(0.1, 0.3, (500, 1))
        result = aggregate_thresholds(draws, data)['White']
        self.assertAlmostEqual(result.mean, draws.mean(), places=12)
        self.assertAlmostEqual(result.lower, np.quantile(draws, 0.025), places=12)

    def test_shape_mismatch(self):
        data = count_table([('White', 'A', 'pre', 900, 90, 30)])
        with self.assertRaises(ThresholdError):
            aggregate_thresholds(np.array([[0.1, 0.2]]), data)


class FitTest(SimpleTestCase):
    """Test cases for fitting, predictive checks and outputs on a small problem"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        truth = small_truth()
        data = simulate_counts(truth, 800, seed=12)
        frame = data.to_frame()
        frame.loc[(frame['race'] == 'Black') & (frame['location'] == 'L03'), ['searches', 'hits']] = 0
        cls.data = ThresholdData.from_frame(frame)
        with warnings.catch_warnings():
            warnings.simplefilter('ignore')
            cls.fit = fit(cls.data, TINY, seed=7)
            cls.check = ppc(cls.fit)

    def test_fit_shapes_and_metadata(self):
        self.assertEqual(self.fit.draws.params.shape, (2, 100, self.fit.model.dimension))
        self.assertEqual(self.fit.metadata['priors']['phi_race'], 'normal(0, 2.0)')
        self.assertEqual(self.fit.metadata['seed'], 7)
        thresholds = self.fit.thresholds()
        self.assertEqual(thresholds.shape, (200, self.data.n_cells))
        self.assertTrue(np.all((thresholds > 0) & (thresholds < 1)))

    def test_cell_summary_intervals(self):
        rows = self.fit.cell_summary()
        self.assertEqual(len(rows), self.data.n_cells)
        for row in rows:
            self.assertLessEqual(row['lower'], row['mean'])
            self.assertLessEqual(row['mean'], row['upper'])

    def test_aggregates_per_race(self):
        aggregates = self.fit.aggregates()
        self.assertEqual(set(aggregates), {'White', 'Black'})
        summary = self.fit.to_dict()
        self.assertEqual(len(summary['aggregates']), 2)
        self.assertIn('max_rhat', summary)

    def test_ppc_rows(self):
        self.assertEqual(len(self.check.rows), self.data.n_groups)
        unsearched = [r for r in self.check.rows if r['searches'] == 0]
        self.assertEqual(len(unsearched), 1)
        self.assertTrue(unsearched[0]['hit_rate_undefined'])
        self.assertIsNone(unsearched[0]['observed_hit_rate'])
        self.assertGreater(unsearched[0]['predicted_hit_rate'], 0.0)
        self.assertEqual(self.check.draws_used, 200)
        for row in self.check.rows:
            self.assertLessEqual(row['search_lower'], row['search_upper'])

    def test_reproducible(self):
        with warnings.catch_warnings():
            warnings.simplefilter('ignore')
            again = fit(self.data, TINY, seed=7)
        np.testing.assert_array_equal(again.draws.params, self.fit.draws.params)

    def test_unconverged_fit_flagged(self):
        with patch('threshold.fitting._diagnose', return_value=(1.4, 12.0)):
            with self.assertWarns(ConvergenceWarning):
                result = fit(self.data, SamplerConfig(chains=2, warmup=20, draws=20, max_depth=4), seed=1)
        self.assertFalse(result.converged)
        self.assertIn('not_converged', result.flags)

    def test_outputs_written(self):
        directory = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, directory)
        written = write_fit_outputs(self.fit, directory, check=self.check)
        names = {os.path.basename(str(p)) for p in written}
        self.assertIn('threshold_summary.json', names)
        self.assertIn('threshold_ppc.csv', names)
        scatter = threshold_scatter(self.fit)
        self.assertEqual(len(scatter), 4)
        self.assertEqual(set(scatter['race']), {'Black'})


class PrePostTest(SimpleTestCase):
    """Test cases for the time-varying extension"""

    def test_all_pre_matches_static_fit(self):
        data = simulate_counts(small_truth(locations=3), 400, seed=14)
        config = SamplerConfig(chains=2, warmup=60, draws=30, max_depth=5)
        with warnings.catch_warnings():
            warnings.simplefilter('ignore')
            static = fit(data, config, seed=3)
            extended = fit_prepost(data, config, seed=3)
        np.testing.assert_array_equal(static.draws.params, extended.draws.params)
        self.assertEqual([r['period'] for r in prepost_summary(extended)], ['pre', 'pre'])

    def test_zero_search_period_flagged(self):
        data = simulate_counts(small_truth(locations=3), 400, seed=15, periods=('pre', 'post'))
        frame = data.to_frame()
        frame.loc[(frame['race'] == 'Black') & (frame['period'] == 'post'), ['searches', 'hits']] = 0
        data = ThresholdData.from_frame(frame)
        stub = ThresholdFit(data, ThresholdModel(data), draws=None, converged=True, max_rhat=1.0, min_ess=400.0)
        with patch('threshold.fitting.fit', return_value=stub):
            result = fit_prepost(data)
        self.assertEqual(result.flags, ['no_searches:Black:post'])

    def test_prepost_summary_reports_change(self):
        data = simulate_counts(small_truth(locations=3, drop=0.05), 400, seed=16, periods=('pre', 'post'))
        model = ThresholdModel(data)
        stub = ThresholdFit(data, model, draws=None, converged=True, max_rhat=1.0, min_ess=400.0)
        theta = np.zeros((50, model.dimension))
        theta[:, model.layout['tau']] = 1.0
        theta[:, model.layout['threshold_post']] = logit(0.4)
        with patch.object(ThresholdFit, 'thresholds', lambda self, period='pre': model.cell_thresholds(theta, period)):
            rows = prepost_summary(stub)
        change = {r['race']: r['mean'] for r in rows if r['period'] == 'change'}
        self.assertAlmostEqual(change['White'], 0.4 - 0.5, places=12)
        self.assertAlmostEqual(change['Black'], 0.4 - 0.5, places=12)


@skipUnless(SLOW, "set TRAFFIC_STOPS_SLOW_TESTS=1 for full-scale recovery checks")
class RecoveryTest(SimpleTestCase):
    """Full-scale recovery of race-aggregate thresholds on model-generated data"""

    def test_aggregate_thresholds_recovered(self):
        covered = 0
        replications = 20
        for replication in range(replications):
            config = SynthConfig(seed=1000 + replication, locations=20, stops_per_group=10_000)
            data, truth = gen_threshold(config)
            with warnings.catch_warnings():
                warnings.simplefilter('ignore')
                result = fit(data, SamplerConfig.from_settings(), seed=config.seed)
            self.assertTrue(result.converged)
            aggregates = result.aggregates()
            covered += all(
                aggregates[race].lower <= truth['aggregate_thresholds'][race] <= aggregates[race].upper
                for race in data.races
            )
        self.assertGreaterEqual(covered / replications, 0.9)

    def test_predictive_calibration(self):
        config = SynthConfig(seed=77, locations=67, stops_per_group=2_000)
        data, _ = gen_threshold(config)
        with warnings.catch_warnings():
            warnings.simplefilter('ignore')
            result = fit(data, SamplerConfig.from_settings(), seed=77)
        check = ppc(result)
        self.assertGreaterEqual(check.search_coverage, 0.90)
        self.assertLessEqual(check.search_coverage, 0.99)
