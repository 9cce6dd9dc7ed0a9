import io
import shutil
import tempfile
import warnings

import numpy as np
from django.test import SimpleTestCase
from scipy import stats

from numerics.random import make_generator

from .diagnostics import PosteriorDraws, ess, rhat, split_chains
from .exceptions import DiagnosticsError, DivergenceWarning, GradientCheckError, InitializationError
from .model import LogDensityModel, Transform, check_gradient
from .nuts import DualAveraging, SamplerConfig, _Chain, _Point, nuts_sample, warmup_windows


def standard_normal(dimension):
    return LogDensityModel(dimension, lambda x: (-0.5 * float(x @ x), -x))


def correlated_normal(rho):
    precision = np.linalg.inv(np.array([[1.0, rho], [rho, 1.0]]))

    def value_and_gradient(x):
        g = precision @ x
        return -0.5 * float(x @ g), -g

    return LogDensityModel(2, value_and_gradient, names=('a', 'b'))


def beta_density(a, b):
    """Beta(a, b) written on (0, 1), lifted through the logit transform."""
    def log_density(y):
        p = y[0]
        return (a - 1) * np.log(p) + (b - 1) * np.log1p(-p), np.array([(a - 1) / p - (b - 1) / (1 - p)])

    return LogDensityModel.from_constrained(log_density, [Transform.LOGIT], names=('p',))


class LogDensityModelTest(SimpleTestCase):
    """Test cases for transforms and gradient validation"""

    def test_transform_round_trip(self):
        model = LogDensityModel.from_constrained(
            lambda y: (0.0, np.zeros(3)), [Transform.IDENTITY, Transform.LOG, Transform.LOGIT],
        )
        y = np.array([-1.5, 2.5, 0.25])
        np.testing.assert_allclose(model.constrain(model.unconstrain(y)), y, rtol=1e-14)

    def test_log_jacobian_added(self):
        """Test an exponential(1) density on the log scale includes the Jacobian"""
        model = LogDensityModel.from_constrained(
            lambda y: (-y[0], np.array([-1.0])), [Transform.LOG],
        )
        x = np.array([0.7])
        value, grad = model(x)
        self.assertAlmostEqual(value, -np.exp(0.7) + 0.7, places=12)
        self.assertAlmostEqual(grad[0], -np.exp(0.7) + 1.0, places=12)

    def test_lifted_gradients_check(self):
        """Test logit and log lifts pass the finite-difference check"""
        self.assertLess(check_gradient(beta_density(2.5, 4.0), make_generator(1)), 1e-5)
        gamma = LogDensityModel.from_constrained(
            lambda y: (2.0 * np.log(y[0]) - 3.0 * y[0], np.array([2.0 / y[0] - 3.0])), [Transform.LOG],
        )
        self.assertLess(check_gradient(gamma, make_generator(2)), 1e-5)

    def test_wrong_gradient_rejected(self):
        model = LogDensityModel(3, lambda x: (-0.5 * float(x @ x), -0.5 * x))
        with self.assertRaises(GradientCheckError) as ctx:
            check_gradient(model, make_generator(3))
        self.assertIn('coordinate', str(ctx.exception))

    def test_non_finite_density_is_minus_infinity(self):
        model = LogDensityModel(1, lambda x: (np.nan, np.zeros(1)))
        self.assertEqual(model(np.zeros(1))[0], -np.inf)


class AdaptationTest(SimpleTestCase):
    """Test cases for warmup schedule and step-size adaptation"""

    def test_default_windows(self):
        self.assertEqual(
            warmup_windows(1000), [(75, 100), (100, 150), (150, 250), (250, 450), (450, 950)],
        )

    def test_short_warmup_windows(self):
        """Test buffers shrink to 15% / 10% for short warmups"""
        self.assertEqual(warmup_windows(100), [(15, 90)])
        self.assertEqual(warmup_windows(10), [])

    def test_windows_cover_slow_phase(self):
        windows = warmup_windows(2500)
        self.assertEqual(windows[0][0], 75)
        self.assertEqual(windows[-1][1], 2450)
        for (_, end), (start, _) in zip(windows, windows[1:]):
            self.assertEqual(end, start)

    def test_dual_averaging_direction(self):
        """Test high acceptance grows the step and low acceptance shrinks it"""
        grow = DualAveraging(0.1)
        shrink = DualAveraging(0.1)
        for _ in range(200):
            grow.learn(1.0)
            shrink.learn(0.2)
        self.assertGreater(grow.final, 0.1)
        self.assertLess(shrink.final, 0.1)


class NutsTest(SimpleTestCase):
    """Test cases for the sampler"""

    def test_standard_normal_moments(self):
        """Test 10-dim standard normal means and variances"""
        config = SamplerConfig(chains=4, warmup=500, draws=2000)
        draws = nuts_sample(standard_normal(10), config, seed=11)
        flat = draws.flat()
        self.assertEqual(flat.shape, (8000, 10))
        self.assertTrue(np.all(np.abs(flat.mean(axis=0)) < 0.05))
        variances = flat.var(axis=0)
        self.assertTrue(np.all((variances > 0.9) & (variances < 1.1)), variances)
        self.assertTrue(np.all(rhat(draws) < 1.05))
        self.assertTrue(draws.converged())
        self.assertEqual(draws.divergence_count, 0)
        self.assertTrue(np.all(draws.tree_depth <= 10))

    def test_one_dimensional_ks(self):
        """Test draws match the analytic CDF at the 1% KS critical value"""
        config = SamplerConfig(chains=4, warmup=500, draws=2500)
        draws = nuts_sample(standard_normal(1), config, seed=12).flat('x[0]')
        statistic = stats.kstest(draws, 'norm').statistic
        self.assertLess(statistic, 1.628 / np.sqrt(draws.size))

    def test_correlated_normal(self):
        """Test a rho = 0.9 target is recovered"""
        config = SamplerConfig(chains=4, warmup=500, draws=1000)
        draws = nuts_sample(correlated_normal(0.9), config, seed=13)
        corr = np.corrcoef(draws.flat('a'), draws.flat('b'))[0, 1]
        self.assertLess(abs(corr - 0.9), 0.05)

    def test_constrained_draws_reported_on_natural_scale(self):
        config = SamplerConfig(chains=2, warmup=300, draws=1000)
        draws = nuts_sample(beta_density(2.0, 6.0), config, seed=14)
        p = draws.flat('p')
        self.assertTrue(np.all((p > 0) & (p < 1)))
        self.assertAlmostEqual(p.mean(), 0.25, delta=0.02)

    def test_reproducible(self):
        """Test identical seeds give identical bytes"""
        config = SamplerConfig(chains=2, warmup=100, draws=100)
        first = nuts_sample(correlated_normal(0.5), config, seed=99)
        second = nuts_sample(correlated_normal(0.5), config, seed=99)
        self.assertEqual(first.params.tobytes(), second.params.tobytes())
        self.assertEqual(first.step_sizes.tobytes(), second.step_sizes.tobytes())
        other = nuts_sample(correlated_normal(0.5), config, seed=100)
        self.assertFalse(np.array_equal(first.params, other.params))

    def test_degenerate_target_rejected(self):
        """Test a zero-variance target fails at initialization"""
        model = LogDensityModel(2, lambda x: (-0.5 * float(x @ x) / 0.0, -x / 0.0))
        with self.assertRaises(InitializationError):
            nuts_sample(model, SamplerConfig(chains=2, warmup=10, draws=10), seed=1)

    def test_bad_gradient_stops_before_sampling(self):
        model = LogDensityModel(2, lambda x: (-0.5 * float(x @ x), x))
        with self.assertRaises(GradientCheckError):
            nuts_sample(model, SamplerConfig(chains=1, warmup=10, draws=10), seed=1)

    def test_divergences_flagged(self):
        """Test a tiny energy bound marks transitions divergent and warns"""
        config = SamplerConfig(chains=2, warmup=20, draws=50, max_energy_error=1e-12)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter('always')
            draws = nuts_sample(standard_normal(3), config, seed=5)
        self.assertGreater(draws.divergence_rate, 0.10)
        self.assertIn('divergences', draws.metadata['flags'])
        self.assertTrue(any(issubclass(w.category, DivergenceWarning) for w in caught))

    def test_leapfrog_energy_drift(self):
        """Test Hamiltonian drift at step 1e-3 on a quadratic target"""
        model = standard_normal(2)
        chain = _Chain(model, SamplerConfig(), make_generator(0))
        x = np.array([1.0, -0.5])
        lp, grad = model(x)
        point = _Point(x, np.array([0.3, 0.8]), lp, grad)
        h0 = chain.hamiltonian(point)
        drift = 0.0
        for _ in range(2000):
            point = chain.leapfrog(point, 1e-3)
            drift = max(drift, abs(chain.hamiltonian(point) - h0))
        self.assertLessEqual(drift, 1e-6)


class DiagnosticsTest(SimpleTestCase):
    """Test cases for R-hat, ESS and draw storage"""

    def test_rhat_identical_chains(self):
        """Test identical, split-symmetric chains have no between-chain variance"""
        half = make_generator(20).normal(size=50)
        chain = np.concatenate([half, half])
        values = rhat(np.stack([chain, chain, chain]))
        self.assertEqual(values[0], 1.0)

    def test_rhat_identical_random_chains(self):
        """Test four copies of one random chain report exactly 1"""
        chain = np.random.default_rng(20).normal(size=200)
        values = rhat(np.stack([chain] * 4))
        self.assertEqual(values[0], 1.0)

    def test_rhat_never_below_one(self):
        samples = make_generator(23).normal(size=(4, 200, 6))
        self.assertTrue(np.all(rhat(samples) >= 1.0))

    def test_rhat_separated_chains(self):
        rng = make_generator(21)
        samples = np.stack([rng.normal(0, 1, 500), rng.normal(5, 1, 500)])
        self.assertGreater(rhat(samples)[0], 1.05)

    def test_rhat_well_mixed(self):
        samples = make_generator(22).normal(size=(4, 1000, 3))
        self.assertTrue(np.all(rhat(samples) < 1.05))

    def test_rhat_constant_parameter(self):
        """Test constant parameters are NaN, not an error"""
        samples = make_generator(23).normal(size=(2, 100, 2))
        samples[:, :, 1] = 3.0
        values = rhat(samples)
        self.assertTrue(np.isnan(values[1]))
        self.assertFalse(np.isnan(values[0]))

    def test_rhat_needs_chains_and_draws(self):
        with self.assertRaises(DiagnosticsError):
            rhat(np.zeros((1, 100)))
        with self.assertRaises(DiagnosticsError):
            rhat(np.zeros((4, 9)))

    def test_split_chains(self):
        samples = np.arange(14.0).reshape(2, 7, 1)
        split = split_chains(samples)
        self.assertEqual(split.shape, (4, 3, 1))
        np.testing.assert_array_equal(split[:, :, 0], [[0, 1, 2], [7, 8, 9], [4, 5, 6], [11, 12, 13]])

    def test_ess_independent_draws(self):
        samples = make_generator(24).normal(size=(4, 1000))
        self.assertTrue(3000 < ess(samples)[0] < 5000)

    def test_ess_autocorrelated_draws(self):
        """Test an AR(1) chain with rho 0.9 has about N (1-rho)/(1+rho) effective draws"""
        rng = make_generator(25)
        samples = np.zeros((4, 2000))
        for c in range(4):
            for t in range(1, 2000):
                samples[c, t] = 0.9 * samples[c, t - 1] + rng.normal() * np.sqrt(1 - 0.81)
        expected = 8000 * 0.1 / 1.9
        self.assertTrue(0.5 * expected < ess(samples)[0] < 1.6 * expected)

    def test_save_and_load(self):
        rng = make_generator(26)
        draws = PosteriorDraws(
            params=rng.normal(size=(2, 30, 2)), names=('mu', 'sigma'), lp=rng.normal(size=(2, 30)),
            divergent=np.zeros((2, 30), dtype=bool), step_sizes=np.array([0.5, 0.6]),
            metadata={'seed': 26},
        )
        directory = tempfile.mkdtemp()
        try:
            draws.save(directory)
            loaded = PosteriorDraws.load(directory)
        finally:
            shutil.rmtree(directory)
        self.assertEqual(loaded.params.tobytes(), draws.params.tobytes())
        self.assertEqual(loaded.names, ('mu', 'sigma'))
        self.assertEqual(loaded.metadata, {'seed': 26})
        np.testing.assert_array_equal(loaded.step_sizes, [0.5, 0.6])

    def test_csv_export_and_summary(self):
        draws = PosteriorDraws(params=make_generator(27).normal(size=(2, 20, 1)), names=('theta',))
        out = io.StringIO()
        draws.to_csv(out)
        lines = out.getvalue().splitlines()
        self.assertEqual(lines[0], 'chain,draw,theta,lp__,divergent__')
        self.assertEqual(len(lines), 41)
        row = draws.summary()[0]
        self.assertEqual(row['name'], 'theta')
        self.assertLess(row['lower'], row['mean'])
        self.assertLess(row['mean'], row['upper'])
        self.assertIsNotNone(row['rhat'])

    def test_shape_mismatch(self):
        with self.assertRaises(DiagnosticsError):
            PosteriorDraws(params=np.zeros((2, 5, 3)), names=('a', 'b'))
