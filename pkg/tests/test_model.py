"""
Tests for the separable model: the sampler, identification of the
components and the posterior draw file.
"""

import os
import tempfile
import unittest
from unittest.mock import patch

import numpy as np

from sepbart.dataset import Dataset, normalize
from sepbart.errors import ConfigError, DrawFileError, SamplerError
from sepbart.model import (
    FitConfig,
    fit,
    merge_chains,
    predict_mu,
    read_draws,
    recenter,
    run_chain,
    write_draws,
)
from sepbart.softbart import Forest

SMALL = dict(iterations=30, burn_in=10, thin=2, trees_f=5, trees_g=5, trees_h=3, log_every=10)


def toy_dataset(n: int = 80, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    W = rng.normal(size=(n, 2)) + 0.3 * X[:, :1]
    y = X[:, 0] + W[:, 1] + X[:, 0] * W[:, 0] + 0.3 * rng.normal(size=n)
    return Dataset(y, X, W)


class TestFitConfig(unittest.TestCase):
    """Test cases for fit configuration."""

    def test_defaults_valid(self):
        config = FitConfig()
        self.assertEqual(config.validate(), [])
        self.assertEqual(config.retained_per_chain, 500)

    def test_all_problems_reported(self):
        problems = FitConfig(iterations=10, burn_in=10, thin=0, trees_f=0).validate()
        self.assertTrue(any("burn_in" in p for p in problems))
        self.assertTrue(any("thin" in p for p in problems))
        self.assertTrue(any("trees_f/num_trees" in p for p in problems))

    def test_from_mapping_unknown_key(self):
        with self.assertRaises(ConfigError) as ctx:
            FitConfig.from_mapping({"iterations": 10, "burnin": 5, "trees": 3})
        problems = ctx.exception.problems
        self.assertEqual(len(problems), 3)
        self.assertIn("burnin: unknown key", problems)
        self.assertIn("burn_in must be >= 0 and < iterations", problems)

    def test_from_mapping_types(self):
        config = FitConfig.from_mapping({"iterations": 100, "burn_in": 50, "rho": 2})
        self.assertIsInstance(config.rho, float)
        with self.assertRaises(ConfigError):
            FitConfig.from_mapping({"iterations": 10.5})


class TestSampler(unittest.TestCase):
    """Test cases for the backfitting chain."""

    @classmethod
    def setUpClass(cls):
        cls.raw = toy_dataset()
        cls.ds, cls.info = normalize(cls.raw)
        cls.config = FitConfig(**SMALL, seed=5)
        cls.samples = run_chain(cls.ds, cls.config, 0, cls.info)

    def test_retained_draws(self):
        self.assertEqual(len(self.samples), self.config.retained_per_chain)
        self.assertEqual([d.iteration for d in self.samples], list(range(10, 30, 2)))
        for draw in self.samples:
            self.assertGreater(draw.state.sigma2, 0)
            self.assertEqual(len(draw.state.interactions), 2)
            for h in draw.state.interactions:
                self.assertLessEqual(h.sigma_mu, h.sigma_mu_cap)

    def test_deterministic(self):
        again = run_chain(self.ds, self.config, 0, self.info)
        for a, b in zip(self.samples, again):
            self.assertEqual(a.state.to_dict(), b.state.to_dict())

    def test_chains_differ(self):
        other = run_chain(self.ds, self.config, 1, self.info)
        self.assertNotEqual(other.draws[-1].state.to_dict(), self.samples.draws[-1].state.to_dict())

    def test_fit_returns_chains_in_order(self):
        config = FitConfig(**dict(SMALL, iterations=12, burn_in=6), chains=2, seed=5)
        chains = fit(self.ds, config, self.info)
        self.assertEqual([c.chain for c in chains], [0, 1])
        merged = merge_chains(chains)
        self.assertEqual(len(merged), len(chains[0]) + len(chains[1]))

    def test_merge_rejects_different_data(self):
        other_ds, other_info = normalize(toy_dataset(seed=9))
        other = run_chain(other_ds, FitConfig(**dict(SMALL, iterations=12, burn_in=6)), 0, other_info)
        with self.assertRaises(DrawFileError):
            merge_chains([self.samples, other])
        with self.assertRaises(DrawFileError):
            merge_chains([])

    def test_divergence_reports_iteration(self):
        with patch.object(Forest, "sweep", side_effect=SamplerError("non-finite residual")):
            with self.assertRaises(SamplerError) as ctx:
                run_chain(self.ds, self.config, 0, self.info)
        self.assertEqual(ctx.exception.iteration, 0)

    def test_null_signal(self):
        rng = np.random.default_rng(1)
        ds = Dataset(np.zeros(100), rng.uniform(size=(100, 2)), rng.uniform(size=(100, 2)))
        samples = run_chain(ds, FitConfig(**dict(SMALL, iterations=120, burn_in=20, thin=1)), 0)
        mean = np.mean([d.predict_mu(ds.X, ds.W) for d in samples], axis=0)
        self.assertLess(np.max(np.abs(mean)), 0.05)


class TestIdentification(unittest.TestCase):
    """Test cases for the shifted components."""

    @classmethod
    def setUpClass(cls):
        ds, info = normalize(toy_dataset(seed=2))
        cls.ds = ds
        cls.samples = run_chain(ds, FitConfig(**SMALL, seed=3), 0, info)
        cls.draw = cls.samples.draws[-1]
        cls.rng = np.random.default_rng(4)

    def test_anchored_zeros(self):
        comp = recenter(self.draw.state, self.samples.x_anchor, self.samples.w_anchor)
        x_bar, w_bar = self.samples.x_anchor, self.samples.w_anchor
        self.assertLess(abs(comp.f(x_bar[None, :])[0]), 1e-10)
        self.assertLess(abs(comp.g(w_bar[None, :])[0]), 1e-10)
        W = self.rng.uniform(size=(50, 2))
        x = self.rng.uniform(size=50)
        for j in range(2):
            np.testing.assert_allclose(comp.h(j, np.full(50, x_bar[j]), W), 0.0, atol=1e-10)
            np.testing.assert_allclose(comp.h(j, x, np.repeat(w_bar[None, :], 50, axis=0)), 0.0,
                                       atol=1e-10)

    def test_telescoping(self):
        comp = recenter(self.draw.state, self.samples.x_anchor, self.samples.w_anchor)
        X = self.rng.uniform(size=(100, 2))
        W = self.rng.uniform(size=(100, 2))
        np.testing.assert_allclose(comp.mean(X, W), self.draw.state.raw_mean(X, W), atol=1e-10)
        np.testing.assert_allclose(predict_mu(self.draw, X, W),
                                   self.draw.predict_mu_unidentified(X, W), atol=1e-10)

    def test_training_cache(self):
        cache = self.draw.training_cache
        fresh = self.draw.evaluate_components(self.ds.X, self.ds.W)
        np.testing.assert_allclose(cache.mean, fresh.mean, atol=1e-12)
        direct = self.draw.components.mean(self.ds.X, self.ds.W)
        np.testing.assert_allclose(cache.mean, direct, atol=1e-12)

    def test_effect_surface(self):
        w0 = np.array([0.3, 0.6])
        effect = self.draw.effect(w0)
        X = self.rng.uniform(size=(6, 2))
        W = self.rng.uniform(size=(4, 2))
        matrix = effect.matrix(X, W)
        self.assertEqual(matrix.shape, (4, 6))
        for k in range(4):
            expected = (self.draw.predict_mu(X, np.repeat(W[k:k + 1], 6, axis=0))
                        - self.draw.predict_mu(X, np.repeat(w0[None, :], 6, axis=0)))
            np.testing.assert_allclose(matrix[k], expected, atol=1e-10)
        np.testing.assert_allclose(effect.paired(X[:4], W), np.diag(effect.matrix(X[:4], W)),
                                   atol=1e-12)


class TestDrawFile(unittest.TestCase):
    """Test cases for the JSON-lines draw file."""

    @classmethod
    def setUpClass(cls):
        ds, info = normalize(toy_dataset(seed=6))
        cls.ds = ds
        cls.samples = run_chain(ds, FitConfig(**SMALL, seed=8), 0, info)

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "draws.jsonl")

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        self.samples.provenance = {"seed": 8}
        write_draws(self.path, self.samples)
        loaded = read_draws(self.path)
        self.assertEqual(len(loaded), len(self.samples))
        self.assertEqual(loaded.config, self.samples.config)
        self.assertEqual(loaded.provenance, {"seed": 8})
        self.assertEqual(loaded.covariate_names, self.samples.covariate_names)
        for a, b in zip(loaded, self.samples):
            np.testing.assert_array_equal(a.predict_mu(self.ds.X, self.ds.W),
                                          b.predict_mu(self.ds.X, self.ds.W))
            self.assertEqual(a.iteration, b.iteration)

    def test_truncated(self):
        write_draws(self.path, self.samples)
        with open(self.path, "r", encoding="utf-8") as f:
            lines = f.readlines()
        with open(self.path, "w", encoding="utf-8") as f:
            f.writelines(lines[:-1])
        with self.assertRaises(DrawFileError) as ctx:
            read_draws(self.path)
        self.assertIn("truncated", str(ctx.exception))

    def test_unknown_format(self):
        with open(self.path, "w", encoding="utf-8") as f:
            f.write('{"format": "other", "version": 1}\n')
        with self.assertRaises(DrawFileError):
            read_draws(self.path)

    def test_missing_file(self):
        with self.assertRaises(DrawFileError):
            read_draws(os.path.join(self.tmp.name, "absent.jsonl"))


if __name__ == "__main__":
    unittest.main()
