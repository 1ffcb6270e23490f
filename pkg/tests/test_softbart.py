"""
Tests for soft-tree ensembles: prediction, the marginal likelihood, the
conjugate leaf draw and the backfitting sweep.
"""

import math
import unittest

import numpy as np
from scipy.stats import multivariate_normal

from sepbart.errors import SamplerError
from sepbart.softbart import (
    Forest,
    SoftBartConfig,
    default_sigma_mu,
    draw_leaves,
    log_evidence,
    predict_forest,
)
from sepbart.trees import SoftRouting, Tree, predict


class TestForestPrediction(unittest.TestCase):
    """Test cases for forest prediction."""

    def test_zero_leaves(self):
        forest = Forest(2, SoftBartConfig(num_trees=5))
        V = np.random.default_rng(0).uniform(size=(10, 2))
        np.testing.assert_array_equal(predict_forest(forest, V), np.zeros(10))

    def test_single_stump(self):
        forest = Forest(1, SoftBartConfig(num_trees=1), trees=[Tree.stump(1.5)])
        self.assertAlmostEqual(float(predict_forest(forest, np.array([[0.3]]))[0]), 1.5)

    def test_sum_of_trees(self):
        rng = np.random.default_rng(1)
        trees = []
        for _ in range(4):
            tree = Tree.stump().grow(0, int(rng.integers(2)), float(rng.uniform()))
            tree = tree.grow(tree.leaves[0], int(rng.integers(2)), float(rng.uniform()))
            tree.set_leaf_values(rng.normal(size=3))
            trees.append(tree)
        forest = Forest(2, SoftBartConfig(num_trees=4), trees=trees, bandwidth=0.07)
        V = rng.uniform(size=(100, 2))
        expected = sum(predict(t, V, SoftRouting(0.07)) for t in trees)
        np.testing.assert_allclose(predict_forest(forest, V), expected, atol=1e-12)

    def test_default_leaf_scale(self):
        forest = Forest(3, SoftBartConfig(num_trees=50))
        self.assertAlmostEqual(forest.sigma_mu, 3.5 / (2 * math.sqrt(50)))
        self.assertAlmostEqual(forest.leaf_var, forest.sigma_mu ** 2 / 50)
        self.assertAlmostEqual(default_sigma_mu(4), 0.875)


class TestConjugateUpdates(unittest.TestCase):
    """Test cases for the leaf-integrated likelihood and the leaf draw."""

    def test_log_evidence_matches_gaussian_marginal(self):
        rng = np.random.default_rng(2)
        n, L = 30, 3
        design = rng.dirichlet(np.ones(L), size=n)
        residual = rng.normal(size=n)
        sigma2, leaf_var = 0.7, 0.2
        cov = sigma2 * np.eye(n) + leaf_var * design @ design.T
        expected = multivariate_normal(mean=np.zeros(n), cov=cov).logpdf(residual)
        constant = -0.5 * n * math.log(2 * math.pi * sigma2) - residual @ residual / (2 * sigma2)
        self.assertAlmostEqual(log_evidence(design, residual, sigma2, leaf_var) + constant,
                               expected, places=8)

    def test_single_leaf_posterior(self):
        """Normal-normal conjugacy: mean sum(r) / (n + sigma2 M / sigma_mu^2)."""
        rng = np.random.default_rng(3)
        n, M, sigma_mu = 40, 10, 0.8
        residual = rng.normal(0.5, 1.0, size=n)
        leaf_var = sigma_mu ** 2 / M
        design = np.ones((n, 1))
        draws = np.array([draw_leaves(design, residual, 1.0, leaf_var, rng)[0] for _ in range(4000)])
        mean = residual.sum() / (n + M / sigma_mu ** 2)
        sd = math.sqrt(1.0 / (n + 1.0 / leaf_var))
        self.assertLess(abs(draws.mean() - mean), 4 * sd / math.sqrt(4000))
        self.assertAlmostEqual(draws.std(), sd, delta=0.1 * sd)


class TestSweep(unittest.TestCase):
    """Test cases for the backfitting sweep."""

    def test_non_finite_residual(self):
        forest = Forest(1, SoftBartConfig(num_trees=2))
        residual = np.zeros(5)
        residual[2] = np.nan
        with self.assertRaises(SamplerError):
            forest.sweep(residual, np.linspace(0, 1, 5)[:, None], 1.0, np.random.default_rng(0))

    def test_hyperparameters_stay_valid(self):
        rng = np.random.default_rng(4)
        V = rng.uniform(size=(80, 3))
        residual = np.sin(4 * V[:, 0]) + 0.1 * rng.normal(size=80)
        forest = Forest(3, SoftBartConfig(num_trees=10))
        for _ in range(30):
            forest.sweep(residual, V, 0.05, rng)
            self.assertGreater(forest.bandwidth, 0)
            self.assertGreater(forest.sigma_mu, 0)
            self.assertTrue(np.all(forest.split_probs >= 0))
            self.assertAlmostEqual(forest.split_probs.sum(), 1.0)
            for tree in forest.trees:
                self.assertLessEqual(tree.max_depth, forest.config.max_depth)
        rates = forest.acceptance_rates()
        self.assertEqual(set(rates), {"grow", "prune", "change"})

    def test_sweep_is_deterministic(self):
        V = np.random.default_rng(5).uniform(size=(50, 2))
        residual = V[:, 0] - 0.5
        fits = []
        for _ in range(2):
            rng = np.random.default_rng(11)
            forest = Forest(2, SoftBartConfig(num_trees=5))
            for _ in range(10):
                forest.sweep(residual, V, 0.1, rng)
            fits.append(forest.predict(V))
        np.testing.assert_array_equal(fits[0], fits[1])

    def test_zero_residual_shrinks(self):
        rng = np.random.default_rng(6)
        V = rng.uniform(size=(60, 2))
        forest = Forest(2, SoftBartConfig(num_trees=10))
        for _ in range(50):
            forest.sweep(np.zeros(60), V, 1.0, rng)
        self.assertLess(np.mean(np.abs(forest.predict(V))), 0.5)

    def test_recovers_linear_signal(self):
        rng = np.random.default_rng(7)
        V = rng.uniform(size=(200, 2))
        y = V[:, 0] + 0.02 * rng.normal(size=200)
        forest = Forest(2, SoftBartConfig(num_trees=20))
        fits = []
        for it in range(300):
            forest.sweep(y, V, 0.02 ** 2 + 0.001, rng)
            if it >= 150:
                fits.append(forest.predict(np.column_stack([np.linspace(0.05, 0.95, 19),
                                                            np.full(19, 0.5)])))
        grid = np.linspace(0.05, 0.95, 19)
        rmse = float(np.sqrt(np.mean((np.mean(fits, axis=0) - grid) ** 2)))
        self.assertLess(rmse, 0.1)

    def test_dict_round_trip(self):
        rng = np.random.default_rng(8)
        V = rng.uniform(size=(40, 2))
        forest = Forest(2, SoftBartConfig(num_trees=4))
        for _ in range(5):
            forest.sweep(V[:, 1], V, 0.1, rng)
        copy = Forest.from_dict(forest.to_dict(), forest.config)
        np.testing.assert_array_equal(copy.predict(V), forest.predict(V))


if __name__ == "__main__":
    unittest.main()
