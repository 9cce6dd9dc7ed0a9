import json
import warnings
from unittest.mock import patch

import numpy as np
import pandas as pd
from django.test import SimpleTestCase
from scipy.special import expit

from numerics.random import make_generator

from .design import Design, Factor, Interaction, design_from_arrays
from .exceptions import GLMError, RankDeficientError, SeparationWarning, UnknownLevelError, ZeroExposureError
from .families import NegativeBinomial, Poisson
from .fitting import PHI_LIMIT, FitResult, fit_count, fit_logistic, predict_rate, sandwich_errors


def two_by_two(successes_a, failures_a, successes_b, failures_b):
    return pd.DataFrame({
        'group': ['a', 'a', 'b', 'b'],
        'y': [1, 0, 1, 0],
        'n': [successes_a, failures_a, successes_b, failures_b],
    })


def count_frame(seed, n_cells, phi=None, coefs=(0.37, -0.40)):
    rng = make_generator(seed)
    frame = pd.DataFrame({
        'race': rng.choice(['White', 'Black', 'Hispanic'], n_cells),
        'gender': rng.choice(['Female', 'Male'], n_cells),
        'location': rng.choice([f"L{i}" for i in range(8)], n_cells),
        'pop': rng.integers(200, 5000, n_cells),
    })
    eta = (-1.2 + coefs[0] * (frame['race'] == 'Black') + coefs[1] * (frame['race'] == 'Hispanic')
           + 0.3 * (frame['gender'] == 'Male'))
    mu = frame['pop'].to_numpy() * np.exp(eta.to_numpy())
    if phi is not None:
        mu = rng.gamma(shape=phi, scale=mu / phi)
    frame['stops'] = rng.poisson(mu)
    return frame


def count_design(frame):
    return Design.from_frame(
        frame, 'stops',
        factors=[Factor('race', 'White'), Factor('gender', 'Female'), Factor('location', 'L0')],
        exposure='pop',
    )


class DesignTest(SimpleTestCase):
    """Test cases for design matrix construction"""

    def test_reference_levels_dropped(self):
        """Test one column per non-reference level"""
        design = count_design(count_frame(1, 200))
        self.assertEqual(design.column_names[0], '(Intercept)')
        self.assertIn('race[Black]', design.column_names)
        self.assertNotIn('race[White]', design.column_names)
        self.assertEqual(design.X.shape[1], 1 + 2 + 1 + 7)

    def test_zero_exposure_rows_reported(self):
        """Test non-positive exposure raises with row identifiers"""
        frame = count_frame(2, 20)
        frame.loc[[3, 7], 'pop'] = 0
        with self.assertRaises(ZeroExposureError) as ctx:
            count_design(frame)
        self.assertEqual(ctx.exception.row_ids, [3, 7])

    def test_missing_reference_level(self):
        """Test an absent reference level is rejected"""
        frame = count_frame(3, 50)
        with self.assertRaises(GLMError):
            Design.from_frame(frame, 'stops', factors=[Factor('race', 'Asian')])

    def test_zero_interaction_column(self):
        """Test an identically-zero interaction column raises"""
        frame = count_frame(4, 50).assign(treated=0.0)
        with self.assertRaises(RankDeficientError):
            Design.from_frame(frame, 'stops', factors=['race'], interactions=[Interaction('race', 'treated')])

    def test_aggregation_preserves_totals(self):
        """Test collapsing binary rows keeps trial and success counts"""
        rng = make_generator(5)
        frame = pd.DataFrame({'g': rng.choice(['a', 'b', 'c'], 500), 'y': rng.integers(0, 2, 500)})
        design = Design.from_frame(frame, 'y', factors=['g'], aggregate=True)
        self.assertEqual(design.rows, 3)
        self.assertEqual(design.total_weight, 500)
        self.assertAlmostEqual(float(design.weights @ design.response), float(frame['y'].sum()))


class LogisticTest(SimpleTestCase):
    """Test cases for logistic regression"""

    def test_intercept_only_balanced(self):
        """Test 50 successes / 50 failures gives intercept 0"""
        frame = pd.DataFrame({'y': [1, 0], 'n': [50, 50]})
        fit = fit_logistic(Design.from_frame(frame, 'y', weights='n'))
        self.assertAlmostEqual(fit.coef('(Intercept)'), 0.0, places=10)
        self.assertTrue(fit.converged)

    def test_two_by_two_odds_ratio(self):
        """Test group coefficient equals the closed-form log odds ratio"""
        fit = fit_logistic(Design.from_frame(two_by_two(100, 100, 200, 100), 'y', factors=['group'], weights='n'))
        self.assertLessEqual(abs(fit.coef('group[b]') - np.log(2.0)), 1e-8)
        self.assertLessEqual(abs(np.exp(fit.coef('group[b]')) - 2.0), 1e-8)

    def test_two_by_two_standard_error(self):
        """Test SE equals the Woolf formula"""
        fit = fit_logistic(Design.from_frame(two_by_two(30, 70, 45, 55), 'y', factors=['group'], weights='n'))
        woolf = np.sqrt(1 / 30 + 1 / 70 + 1 / 45 + 1 / 55)
        self.assertAlmostEqual(fit.std_error('group[b]'), woolf, places=8)

    def test_stop_level_rows_aggregate(self):
        """Test stop-level and aggregated rows give the same fit"""
        counts = two_by_two(13, 27, 31, 9)
        stops = counts.loc[counts.index.repeat(counts['n'])].drop(columns='n').reset_index(drop=True)
        aggregated = fit_logistic(Design.from_frame(stops, 'y', factors=['group'], aggregate=True))
        weighted = fit_logistic(Design.from_frame(counts, 'y', factors=['group'], weights='n'))
        np.testing.assert_allclose(aggregated.coefficients, weighted.coefficients, atol=1e-10)

    def test_separation_flagged(self):
        """Test perfectly predicted groups are flagged and not converged"""
        frame = two_by_two(40, 60, 80, 0)
        frame = frame[frame['n'] > 0]
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter('always')
            fit = fit_logistic(Design.from_frame(frame, 'y', factors=['group'], weights='n'))
        self.assertIn('separation', fit.flags)
        self.assertFalse(fit.converged)
        self.assertTrue(any(issubclass(w.category, SeparationWarning) for w in caught))

    def test_score_vanishes(self):
        """Test the score max-norm at the optimum"""
        rng = make_generator(6)
        x = rng.normal(size=3000)
        frame = pd.DataFrame({'x': x, 'g': rng.choice(['a', 'b'], 3000)})
        frame['y'] = rng.random(3000) < expit(0.5 * x - 0.2)
        frame['y'] = frame['y'].astype(int)
        design = Design.from_frame(frame, 'y', factors=['g'], numeric=['x'])
        fit = fit_logistic(design)
        mu = expit(design.X @ fit.coefficients)
        score = design.X.T @ (design.weights * (design.response - mu))
        self.assertLessEqual(np.max(np.abs(score)), 1e-6)

    def test_score_vanishes_with_millions_of_stops(self):
        """Test the score max-norm stays under 1e-6 when cells carry millions of stops"""
        rng = make_generator(9)
        x = np.linspace(-2.0, 2.0, 200)
        trials = rng.integers(5000, 20000, 200)
        successes = rng.binomial(trials, expit(0.8 * x - 1.0))
        frame = pd.DataFrame({
            'x': np.concatenate([x, x]),
            'y': [1] * 200 + [0] * 200,
            'n': np.concatenate([successes, trials - successes]),
        })
        design = Design.from_frame(frame, 'y', numeric=['x'], weights='n')
        self.assertGreater(design.total_weight, 1e6)
        fit = fit_logistic(design)
        self.assertTrue(fit.converged)
        mu = expit(design.X @ fit.coefficients)
        score = design.X.T @ (design.weights * (design.response - mu))
        self.assertLessEqual(np.max(np.abs(score)), 1e-6)

    def test_predict_rate(self):
        """Test reference profile prediction and level validation"""
        fit = fit_logistic(Design.from_frame(two_by_two(30, 70, 45, 55), 'y', factors=['group'], weights='n'))
        self.assertAlmostEqual(predict_rate(fit, {'group': 'a'}), 0.3, places=10)
        self.assertAlmostEqual(predict_rate(fit, {'group': 'b'}), 0.45, places=10)
        self.assertAlmostEqual(
            predict_rate(fit, {'group': {'a': 1, 'b': 1}}),
            float(expit(fit.coef('(Intercept)') + 0.5 * fit.coef('group[b]'))),
            places=12,
        )
        with self.assertRaises(UnknownLevelError):
            predict_rate(fit, {'group': 'z'})
        with self.assertRaises(GLMError):
            predict_rate(fit, {})

    def test_collinear_design(self):
        """Test duplicated columns raise RankDeficientError"""
        rng = make_generator(7)
        x = rng.normal(size=100)
        y = (rng.random(100) < 0.5).astype(float)
        design = design_from_arrays(y, np.column_stack([np.ones(100), x, x]), ['(Intercept)', 'x', 'x2'])
        with self.assertRaises(RankDeficientError):
            fit_logistic(design)


class CountModelTest(SimpleTestCase):
    """Test cases for Poisson, quasi-Poisson and negative binomial fits"""

    def test_poisson_and_quasi_share_coefficients(self):
        """Test quasi-Poisson only rescales the covariance"""
        design = count_design(count_frame(10, 2000, phi=3.0))
        poisson = fit_count(design, 'poisson')
        quasi = fit_count(design, 'quasipoisson')
        np.testing.assert_array_equal(poisson.coefficients, quasi.coefficients)
        np.testing.assert_allclose(quasi.covariance, poisson.covariance * quasi.dispersion)
        self.assertGreater(quasi.dispersion, 1.0)

    def test_offset_shift_moves_intercept_only(self):
        """Test adding a constant to the log exposure shifts only the intercept"""
        frame = count_frame(11, 1000)
        base = fit_count(count_design(frame), 'poisson')
        shifted = fit_count(count_design(frame.assign(pop=frame['pop'] * np.e)), 'poisson')
        self.assertLessEqual(abs(base.coef('(Intercept)') - 1.0 - shifted.coef('(Intercept)')), 1e-8)
        np.testing.assert_allclose(base.coefficients[1:], shifted.coefficients[1:], atol=1e-8)

    def test_row_permutation_is_bit_identical(self):
        """Test shuffled input rows give identical bits"""
        frame = count_frame(12, 1500, phi=5.0)
        shuffled = frame.sample(frac=1.0, random_state=3)
        first = fit_count(count_design(frame), 'negbin')
        second = fit_count(count_design(shuffled), 'negbin')
        np.testing.assert_array_equal(first.coefficients, second.coefficients)
        np.testing.assert_array_equal(first.covariance, second.covariance)
        self.assertEqual(first.dispersion, second.dispersion)

    def test_negbin_recovers_truth(self):
        """Test phi = 4 and race coefficients are recovered from 50,000 cells"""
        fit = fit_count(count_design(count_frame(13, 50000, phi=4.0)), 'negbin')
        self.assertTrue(fit.converged)
        self.assertLessEqual(abs(fit.dispersion - 4.0) / 4.0, 0.10)
        self.assertLessEqual(abs(fit.coef('race[Black]') - 0.37), 3 * fit.std_error('race[Black]'))
        self.assertLessEqual(abs(fit.coef('race[Hispanic]') + 0.40), 3 * fit.std_error('race[Hispanic]'))
        self.assertGreater(fit.dispersion_se, 0.0)

    def test_equidispersed_data_fall_back_to_poisson(self):
        """Test underdispersed counts return the Poisson fit with a flag"""
        rng = make_generator(14)
        frame = pd.DataFrame({'g': rng.choice(['a', 'b'], 5000), 'pop': 1})
        frame['stops'] = rng.binomial(20, 0.5, 5000)
        design = Design.from_frame(frame, 'stops', factors=['g'], exposure='pop')
        fit = fit_count(design, 'negbin')
        self.assertEqual(fit.family, 'poisson')
        self.assertIn('equidispersed', fit.flags)
        np.testing.assert_array_equal(fit.coefficients, fit_count(design, 'poisson').coefficients)

    def test_phi_stalled_at_limit_falls_back_to_poisson(self):
        """Test a phi search that stops exactly at the limit still returns the flagged Poisson fit"""
        design = count_design(count_frame(18, 2000, phi=5.0))
        with patch('glm.fitting._fit_phi', return_value=PHI_LIMIT):
            fit = fit_count(design, 'negbin')
        self.assertEqual(fit.family, 'poisson')
        self.assertIn('equidispersed', fit.flags)
        self.assertEqual(fit.dispersion, 1.0)

    def test_negbin_loglik_approaches_poisson(self):
        """Test NB log-likelihood at phi = 1e6 matches Poisson"""
        design = count_design(count_frame(15, 3000))
        fit = fit_count(design, 'poisson')
        mu = np.exp(design.X @ fit.coefficients + design.offset)
        y, w = design.response, design.weights
        poisson = Poisson().loglik(y, mu, w)
        negbin = NegativeBinomial(1e6).loglik(y, mu, w)
        self.assertLessEqual(abs(negbin - poisson) / abs(poisson), 1e-4)

    def test_score_vanishes_for_every_family(self):
        """Test score max-norm at the optimum"""
        design = count_design(count_frame(16, 3000, phi=6.0))
        for family in ('poisson', 'quasipoisson', 'negbin'):
            fit = fit_count(design, family)
            mu = np.exp(design.X @ fit.coefficients + design.offset)
            shrink = 1.0 if fit.family != 'negbin' else 1.0 / (1.0 + mu / fit.dispersion)
            score = design.X.T @ (design.weights * (design.response - mu) * shrink)
            self.assertLessEqual(np.max(np.abs(score)), 1e-6, family)

    def test_poisson_score_vanishes_on_many_cells(self):
        """Test the score bound holds for 20,000 cells"""
        design = count_design(count_frame(17, 20000))
        fit = fit_count(design, 'poisson')
        self.assertTrue(fit.converged)
        mu = np.exp(design.X @ fit.coefficients + design.offset)
        score = design.X.T @ (design.weights * (design.response - mu))
        self.assertLessEqual(np.max(np.abs(score)), 1e-6)

    def test_rejects_non_integer_counts(self):
        """Test fractional counts are rejected"""
        frame = count_frame(17, 50).astype({'stops': float})
        frame.loc[0, 'stops'] = 1.5
        with self.assertRaises(GLMError):
            fit_count(count_design(frame), 'poisson')

    def test_unknown_family(self):
        """Test unknown family names are rejected"""
        with self.assertRaises(GLMError):
            fit_count(count_design(count_frame(18, 50)), 'gamma')

    def test_predict_rate_is_per_exposure(self):
        """Test count predictions exclude the offset"""
        fit = fit_count(count_design(count_frame(19, 4000)), 'poisson')
        rate = predict_rate(fit, {'race': 'White', 'gender': 'Female', 'location': 'L0'})
        self.assertAlmostEqual(rate, np.exp(fit.coef('(Intercept)')))
        self.assertLess(abs(np.log(rate) + 1.2), 0.05)


class SandwichTest(SimpleTestCase):
    """Test cases for robust covariance"""

    def test_coefficients_unchanged(self):
        """Test sandwich touches only the covariance"""
        design = count_design(count_frame(20, 2000, phi=2.0))
        fit = fit_count(design, 'poisson')
        robust = sandwich_errors(fit, design)
        np.testing.assert_array_equal(fit.coefficients, robust.coefficients)
        self.assertEqual(robust.covariance_type, 'sandwich')

    def test_equidispersed_close_to_model(self):
        """Test sandwich SEs near model SEs on Poisson data"""
        design = count_design(count_frame(21, 10000))
        fit = fit_count(design, 'poisson')
        ratio = sandwich_errors(fit, design).std_errors / fit.std_errors
        self.assertTrue(np.all((ratio > 0.8) & (ratio < 1.2)), ratio)

    def test_overdispersed_larger(self):
        """Test sandwich SEs exceed model SEs on NB data"""
        design = count_design(count_frame(22, 10000, phi=2.0))
        fit = fit_count(design, 'poisson')
        self.assertTrue(np.all(sandwich_errors(fit, design).std_errors > fit.std_errors))

    def test_rejects_logistic(self):
        """Test non-Poisson fits are rejected"""
        design = Design.from_frame(two_by_two(30, 70, 45, 55), 'y', factors=['group'], weights='n')
        with self.assertRaises(GLMError):
            sandwich_errors(fit_logistic(design), design)


class FitResultTest(SimpleTestCase):
    """Test cases for FitResult serialization"""

    def test_json_round_trip(self):
        """Test to_json / from_dict preserve the fit"""
        fit = fit_count(count_design(count_frame(23, 500, phi=3.0)), 'negbin')
        restored = FitResult.from_dict(json.loads(fit.to_json()))
        self.assertEqual(restored.names, fit.names)
        np.testing.assert_array_equal(restored.coefficients, fit.coefficients)
        np.testing.assert_array_equal(restored.std_errors, fit.std_errors)
        self.assertEqual(restored.dispersion, fit.dispersion)
        self.assertEqual(
            predict_rate(restored, {'race': 'Black', 'gender': 'Male', 'location': 'L3'}),
            predict_rate(fit, {'race': 'Black', 'gender': 'Male', 'location': 'L3'}),
        )

    def test_names_align_with_std_errors(self):
        """Test std_errors are the covariance diagonal"""
        fit = fit_count(count_design(count_frame(24, 500)), 'poisson')
        self.assertEqual(len(fit.names), len(fit.std_errors))
        np.testing.assert_array_equal(fit.std_errors, np.sqrt(np.diag(fit.covariance)))
