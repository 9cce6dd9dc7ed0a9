import numpy as np
from django.test import SimpleTestCase
from scipy import integrate, sparse, stats
from scipy.special import betaincc, betainc

from .exceptions import DomainError, NotPositiveDefiniteError
from .linalg import pairwise_sum, solve_spd, spd_inverse, weighted_crossprod
from .random import RngState, make_generator
from .special import (
    BetaShape,
    beta_tail_mean,
    beta_tail_rates,
    log_reg_inc_beta,
    reg_inc_beta,
    reg_inc_beta_grad,
)


def quad(func, lower, upper):
    value, _ = integrate.quad(func, lower, upper, epsabs=0.0, epsrel=1e-13, limit=200)
    return value


class RegIncBetaTest(SimpleTestCase):
    """Test cases for the regularized incomplete beta function"""

    def test_boundaries(self):
        """Test I_0 = 0 and I_1 = 1"""
        self.assertEqual(reg_inc_beta(0.0, 2.5, 3.0), 0.0)
        self.assertEqual(reg_inc_beta(1.0, 2.5, 3.0), 1.0)

    def test_uniform_case(self):
        """Test I_x(1, 1) = x"""
        for x in (0.01, 0.2, 0.5, 0.77, 0.999):
            self.assertAlmostEqual(reg_inc_beta(x, 1.0, 1.0), x, places=14)

    def test_quadrature_oracle(self):
        """Test I_0.2(2, 5) against numeric integration of the density"""
        expected = quad(lambda p: stats.beta.pdf(p, 2.0, 5.0), 0.0, 0.2)
        self.assertLessEqual(abs(reg_inc_beta(0.2, 2.0, 5.0) - expected) / expected, 1e-12)

    def test_matches_library_grid(self):
        """Test agreement with scipy's betainc over a grid"""
        rng = make_generator(7)
        x = rng.uniform(0.001, 0.999, 500)
        a = rng.uniform(0.3, 40.0, 500)
        b = rng.uniform(0.3, 40.0, 500)
        ours = reg_inc_beta(x, a, b)
        np.testing.assert_allclose(ours, betainc(a, b, x), rtol=1e-11, atol=1e-300)

    def test_matches_library_large_lambda(self):
        """Test 1e-12 relative agreement for total counts up to 1000"""
        rng = make_generator(8)
        for low, high in ((1.0, 10.0), (10.0, 100.0), (100.0, 1000.0)):
            lam = rng.uniform(low, high, 400)
            phi = rng.uniform(0.02, 0.98, 400)
            x = rng.uniform(0.001, 0.999, 400)
            a, b = phi * lam, (1.0 - phi) * lam
            expected = betainc(a, b, x)
            keep = expected > 1e-280
            np.testing.assert_allclose(reg_inc_beta(x, a, b)[keep], expected[keep], rtol=1e-12, atol=0.0)
            log_lower, log_upper = log_reg_inc_beta(x, a, b)
            np.testing.assert_allclose(np.exp(log_lower)[keep], expected[keep], rtol=1e-12, atol=0.0)
            upper = betaincc(a, b, x)
            keep = upper > 1e-280
            np.testing.assert_allclose(np.exp(log_upper)[keep], upper[keep], rtol=1e-12, atol=0.0)

    def test_balanced_large_shapes(self):
        """Test I_0.5(a, a) = 0.5 at large a"""
        for a in (500.0, 5000.0):
            self.assertLessEqual(abs(reg_inc_beta(0.5, a, a) - 0.5), 1e-12)

    def test_symmetry_identity(self):
        """Test I_x(a, b) + I_{1-x}(b, a) = 1"""
        for x in np.linspace(0.01, 0.99, 15):
            for a in (0.5, 1.0, 3.0, 12.0, 80.0, 350.0, 900.0):
                for b in (0.7, 2.0, 9.0, 40.0, 250.0, 1000.0):
                    total = reg_inc_beta(x, a, b) + reg_inc_beta(1.0 - x, b, a)
                    self.assertLessEqual(abs(total - 1.0), 1e-12)

    def test_monotone_in_x(self):
        """Test I_x is non-decreasing in x"""
        values = reg_inc_beta(np.linspace(0.0, 1.0, 401), 3.0, 7.0)
        self.assertTrue(np.all(np.diff(values) >= 0.0))

    def test_log_tails_do_not_underflow(self):
        """Test log variant stays finite where the value underflows"""
        log_lower, log_upper = log_reg_inc_beta(0.001, 500.0, 20.0)
        self.assertTrue(np.isfinite(log_lower))
        self.assertLess(log_lower, -700.0)
        self.assertAlmostEqual(log_upper, 0.0, places=12)

    def test_domain_errors(self):
        """Test arguments outside the domain raise DomainError"""
        with self.assertRaises(DomainError):
            reg_inc_beta(1.5, 1.0, 1.0)
        with self.assertRaises(DomainError):
            reg_inc_beta(0.5, 0.0, 1.0)
        with self.assertRaises(DomainError):
            reg_inc_beta(0.5, 1.0, -2.0)

    def test_x_derivative_is_density(self):
        """Test d/dx I_x(a, b) equals the beta density"""
        h = 1e-6
        for x, a, b in [(0.3, 2.0, 5.0), (0.7, 0.8, 1.5), (0.5, 10.0, 10.0), (0.05, 1.2, 30.0)]:
            grad = reg_inc_beta_grad(x, a, b)
            analytic = np.exp(grad.log_lower) * grad.dlower_dx
            numeric = (reg_inc_beta(x + h, a, b) - reg_inc_beta(x - h, a, b)) / (2 * h)
            self.assertLessEqual(abs(analytic - numeric) / abs(analytic), 1e-6)
            self.assertAlmostEqual(analytic, stats.beta.pdf(x, a, b), places=8)

    def test_shape_derivatives(self):
        """Test log-tail derivatives in a and b against central differences"""
        h = 1e-6
        for x, a, b in [(0.2, 2.0, 5.0), (0.8, 2.0, 5.0), (0.4, 0.6, 0.9), (0.15, 25.0, 60.0)]:
            grad = reg_inc_beta_grad(x, a, b)
            lower_a = (log_reg_inc_beta(x, a + h, b)[0] - log_reg_inc_beta(x, a - h, b)[0]) / (2 * h)
            lower_b = (log_reg_inc_beta(x, a, b + h)[0] - log_reg_inc_beta(x, a, b - h)[0]) / (2 * h)
            upper_a = (log_reg_inc_beta(x, a + h, b)[1] - log_reg_inc_beta(x, a - h, b)[1]) / (2 * h)
            upper_b = (log_reg_inc_beta(x, a, b + h)[1] - log_reg_inc_beta(x, a, b - h)[1]) / (2 * h)
            for analytic, numeric in [
                (grad.dlower_da, lower_a),
                (grad.dlower_db, lower_b),
                (grad.dupper_da, upper_a),
                (grad.dupper_db, upper_b),
            ]:
                self.assertLessEqual(abs(analytic - numeric), 1e-5 * max(1.0, abs(numeric)))


class BetaTailMeanTest(SimpleTestCase):
    """Test cases for analytic search and hit rates"""

    def test_shape_validation(self):
        """Test BetaShape rejects values outside its domain"""
        with self.assertRaises(DomainError):
            BetaShape(1.0, 5.0)
        with self.assertRaises(DomainError):
            BetaShape(0.3, 0.0)
        shape = BetaShape(0.3, 5.0)
        self.assertAlmostEqual(shape.alpha, 1.5)
        self.assertAlmostEqual(shape.beta, 3.5)

    def test_zero_threshold(self):
        """Test t = 0 searches everyone and hit rate is the mean"""
        moments = beta_tail_mean(BetaShape(0.3, 5.0), 0.0)
        self.assertEqual(moments.search_rate, 1.0)
        self.assertAlmostEqual(moments.hit_rate, 0.3, places=14)
        self.assertFalse(moments.degenerate)

    def test_unit_threshold(self):
        """Test t = 1 leaves an empty search region"""
        moments = beta_tail_mean(BetaShape(0.3, 5.0), 1.0)
        self.assertEqual(moments.search_rate, 0.0)
        self.assertEqual(moments.hit_rate, 0.0)
        self.assertTrue(moments.degenerate)

    def test_threshold_domain(self):
        """Test thresholds outside [0, 1] raise"""
        with self.assertRaises(DomainError):
            beta_tail_mean(BetaShape(0.3, 5.0), 1.2)

    def test_quadrature_example(self):
        """Test phi=0.3, lambda=5, t=0.2 against quadrature"""
        density = stats.beta(1.5, 3.5).pdf
        search = quad(density, 0.2, 1.0)
        hit = quad(lambda p: p * density(p), 0.2, 1.0) / search
        moments = beta_tail_mean(BetaShape(0.3, 5.0), 0.2)
        self.assertLessEqual(abs(moments.search_rate - search), 1e-10)
        self.assertLessEqual(abs(moments.hit_rate - hit), 1e-10)

    def test_quadrature_grid(self):
        """Test a grid of smooth shapes against quadrature"""
        rng = make_generator(11)
        for _ in range(60):
            phi = rng.uniform(0.1, 0.9)
            lam = rng.uniform(1.0 / min(phi, 1 - phi), 60.0)
            t = rng.uniform(0.01, 0.99)
            density = stats.beta(phi * lam, (1 - phi) * lam).pdf
            search = quad(density, t, 1.0)
            if search < 1e-8:
                continue
            hit = quad(lambda p: p * density(p), t, 1.0) / search
            moments = beta_tail_mean(BetaShape(phi, lam), t)
            self.assertLessEqual(abs(moments.search_rate - search), 1e-10)
            self.assertLessEqual(abs(moments.hit_rate - hit), 1e-9)

    def test_library_grid(self):
        """Test 1,000 shapes against scipy's complemented incomplete beta"""
        rng = make_generator(12)
        phi = rng.uniform(0.05, 0.95, 1000)
        lam = rng.uniform(2.0, 200.0, 1000)
        t = rng.uniform(0.0, 1.0, 1000)
        alpha, beta = phi * lam, (1 - phi) * lam
        search, hit, degenerate = beta_tail_rates(phi, lam, t)
        expected_search = betaincc(alpha, beta, t)
        np.testing.assert_allclose(search, expected_search, rtol=0, atol=1e-10)
        ok = expected_search > 1e-6
        expected_hit = phi[ok] * betaincc(alpha[ok] + 1.0, beta[ok], t[ok]) / expected_search[ok]
        np.testing.assert_allclose(hit[ok], expected_hit, rtol=1e-9, atol=1e-10)

    def test_hit_rate_exceeds_threshold(self):
        """Test conditional mean lies in [t, 1] when anyone is searched"""
        rng = make_generator(13)
        phi = rng.uniform(0.05, 0.95, 2000)
        lam = rng.uniform(2.0, 100.0, 2000)
        t = rng.uniform(0.0, 1.0, 2000)
        search, hit, degenerate = beta_tail_rates(phi, lam, t)
        searched = (search > 1e-10) & ~degenerate
        self.assertTrue(np.all(hit[searched] >= t[searched] - 1e-12))
        self.assertTrue(np.all(hit[searched] <= 1.0))


class SolveSpdTest(SimpleTestCase):
    """Test cases for SPD solves"""

    def test_identity(self):
        """Test identity solve returns the right-hand side"""
        rhs = np.array([1.0, -2.0, 3.5])
        np.testing.assert_array_equal(solve_spd(np.eye(3), rhs), rhs)

    def test_diagonal(self):
        """Test a diagonal system"""
        np.testing.assert_allclose(solve_spd(np.array([[2.0, 0.0], [0.0, 4.0]]), [2.0, 4.0]), [1.0, 1.0])

    def test_random_against_inverse(self):
        """Test a random 50x50 SPD system against the explicit inverse"""
        rng = make_generator(3)
        factor = rng.normal(size=(50, 50))
        matrix = factor @ factor.T + 50 * np.eye(50)
        rhs = rng.normal(size=50)
        np.testing.assert_allclose(solve_spd(matrix, rhs), np.linalg.inv(matrix) @ rhs, atol=1e-8)
        np.testing.assert_allclose(spd_inverse(matrix), np.linalg.inv(matrix), atol=1e-10)

    def test_not_positive_definite(self):
        """Test indefinite and singular matrices raise"""
        with self.assertRaises(NotPositiveDefiniteError):
            solve_spd(np.array([[1.0, 2.0], [2.0, 1.0]]), [1.0, 1.0])
        with self.assertRaises(NotPositiveDefiniteError):
            solve_spd(np.array([[1.0, 1.0], [1.0, 1.0]]), [1.0, 1.0])
        with self.assertRaises(NotPositiveDefiniteError):
            solve_spd(np.array([[1.0, 0.5], [0.0, 1.0]]), [1.0, 1.0])

    def test_large_sparse(self):
        """Test the iterative path on a large sparse system"""
        n = 6000
        main = np.full(n, 4.0)
        off = np.full(n - 1, -1.0)
        matrix = sparse.diags([off, main, off], [-1, 0, 1], format='csr')
        rhs = make_generator(5).normal(size=n)
        solution = solve_spd(matrix, rhs)
        self.assertLessEqual(np.linalg.norm(matrix @ solution - rhs), 1e-8 * np.linalg.norm(rhs))

    def test_small_sparse(self):
        """Test small sparse systems take the dense path"""
        matrix = sparse.csr_matrix(np.array([[2.0, 0.0], [0.0, 4.0]]))
        np.testing.assert_allclose(solve_spd(matrix, [2.0, 4.0]), [1.0, 1.0])


class WeightedCrossprodTest(SimpleTestCase):
    """Test cases for blocked cross-products"""

    def setUp(self):
        rng = make_generator(21)
        self.X = rng.normal(size=(1000, 6))
        self.w = rng.uniform(0.5, 2.0, 1000)
        self.z = rng.normal(size=1000)

    def test_matches_direct(self):
        """Test blocked result equals the direct product"""
        xtwx, xtwz = weighted_crossprod(self.X, self.w, self.z, block_rows=128)
        np.testing.assert_allclose(xtwx, self.X.T @ (self.X * self.w[:, None]), rtol=1e-12)
        np.testing.assert_allclose(xtwz, self.X.T @ (self.w * self.z), rtol=1e-12)

    def test_worker_count_is_bit_identical(self):
        """Test thread count does not change the result bits"""
        serial = weighted_crossprod(self.X, self.w, block_rows=64, workers=1)
        threaded = weighted_crossprod(self.X, self.w, block_rows=64, workers=4)
        np.testing.assert_array_equal(serial, threaded)

    def test_sparse_input(self):
        """Test sparse designs give the dense answer"""
        dense = weighted_crossprod(self.X, self.w, block_rows=100)
        np.testing.assert_allclose(
            weighted_crossprod(sparse.csr_matrix(self.X), self.w, block_rows=100), dense, rtol=1e-12
        )

    def test_pairwise_sum(self):
        """Test pairwise sum over odd-length lists"""
        self.assertEqual(pairwise_sum([1, 2, 3, 4, 5]), 15)
        with self.assertRaises(ValueError):
            pairwise_sum([])


class RngStateTest(SimpleTestCase):
    """Test cases for counter-based random streams"""

    def test_same_state_same_sequence(self):
        """Test identical (seed, stream_id) reproduce the sequence"""
        first = RngState(42, 3).generator().random(100)
        second = RngState(42, 3).generator().random(100)
        np.testing.assert_array_equal(first, second)

    def test_distinct_streams_differ(self):
        """Test distinct streams share no identical 64-draw prefix"""
        prefixes = {tuple(RngState(42, s).generator().integers(0, 2**63, 64)) for s in range(50)}
        self.assertEqual(len(prefixes), 50)

    def test_spawn_is_deterministic(self):
        """Test spawned children are stable and distinct"""
        children = RngState(9).spawn(4)
        self.assertEqual(children, RngState(9).spawn(4))
        self.assertEqual(len({child.stream_id for child in children}), 4)

    def test_rejects_out_of_range(self):
        """Test negative seeds are rejected"""
        with self.assertRaises(ValueError):
            RngState(-1)
