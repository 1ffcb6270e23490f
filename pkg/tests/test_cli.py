"""
Tests for the command-line interface module.

This module tests configuration resolution, the error records and exit
codes of main, and a small end-to-end run of simulate, fit, estimate and
diagnose.
"""

import argparse
import json
import os
import tempfile
import unittest
from io import StringIO
from unittest.mock import patch

import numpy as np
import pandas as pd
import yaml

from sepbart.cli import (
    ContrastSection,
    RunConfig,
    apply_overrides,
    create_parser,
    load_config_file,
    main,
    resolve_config,
    resolve_contrast,
)
from sepbart.errors import ConfigError, DatasetError
from sepbart.estimands import ExposureContrast


class TestCliArgParser(unittest.TestCase):
    """Test cases for the CLI argument parser."""

    def test_create_parser(self):
        """Test creation of argument parser."""
        parser = create_parser()
        self.assertIsInstance(parser, argparse.ArgumentParser)

        args = parser.parse_args(["simulate"])
        self.assertEqual(args.command, "simulate")
        self.assertIsNone(args.seed)
        self.assertIsNone(args.config)
        self.assertEqual(args.verbose, 0)

        args = parser.parse_args(["estimate", "a.jsonl", "b.jsonl", "--seed", "4", "-vv",
                                  "--set", "estimate.method=mean", "--set", "estimate.blocks=2"])
        self.assertEqual(args.draws, ["a.jsonl", "b.jsonl"])
        self.assertEqual(args.seed, 4)
        self.assertEqual(args.verbose, 2)
        self.assertEqual(args.set, ["estimate.method=mean", "estimate.blocks=2"])

    def test_study_arguments(self):
        args = create_parser().parse_args(["study", "--scenario", "violation1", "--replicates", "3"])
        self.assertEqual(args.scenario, "violation1")
        self.assertEqual(args.replicates, 3)

    def test_draws_required(self):
        with patch("sys.stderr", new_callable=StringIO):
            with self.assertRaises(SystemExit):
                create_parser().parse_args(["diagnose"])


class TestRunConfig(unittest.TestCase):
    """Test cases for configuration resolution."""

    def test_defaults(self):
        config = RunConfig.from_mapping({})
        self.assertEqual(config.seed, 0)
        self.assertEqual(config.contrast.w0, "q25")
        self.assertEqual(config.estimate.method, "regression")

    def test_unknown_keys_listed_together(self):
        with self.assertRaises(ConfigError) as ctx:
            RunConfig.from_mapping({"sed": 1, "fit": {"iterations": 10, "trees": 3}})
        problems = ctx.exception.problems
        self.assertIn("sed: unknown key", problems)
        self.assertIn("fit.trees: unknown key", problems)

    def test_invalid_values_listed_together(self):
        with self.assertRaises(ConfigError) as ctx:
            RunConfig.from_mapping({"estimate": {"method": "spline", "alpha": 2.0},
                                    "contrast": {"w0": "median"}})
        self.assertEqual(len(ctx.exception.problems), 3)

    def test_all_sections_validated_despite_key_problems(self):
        with self.assertRaises(ConfigError) as ctx:
            RunConfig.from_mapping({"fit": {"bogus": 1}, "estimate": {"alpha": 5.0},
                                    "study": {"replicates": "many", "num_points": 0}})
        problems = ctx.exception.problems
        self.assertIn("fit.bogus: unknown key", problems)
        self.assertIn("estimate.alpha must be in (0, 1)", problems)
        self.assertIn("study.num_points must be >= 1", problems)
        self.assertTrue(any(p.startswith("study.replicates:") for p in problems))
        self.assertEqual(len(problems), 4)

    def test_master_seed_reaches_fit(self):
        config = RunConfig.from_mapping({"seed": 11, "fit": {"seed": 3}})
        self.assertEqual(config.fit.seed, 11)

    def test_overrides(self):
        args = create_parser().parse_args(["simulate", "--seed", "3", "--chains", "2",
                                           "--set", "simulate.n=500", "--set", "threads=2"])
        merged = apply_overrides({"simulate": {"scenario": "none"}}, args)
        self.assertEqual(merged["simulate"], {"scenario": "none", "n": 500})
        config = RunConfig.from_mapping(merged)
        self.assertEqual(config.seed, 3)
        self.assertEqual(config.threads, 2)
        self.assertEqual(config.fit.chains, 2)
        self.assertEqual(config.fit.seed, 3)

    def test_malformed_override(self):
        args = create_parser().parse_args(["simulate", "--set", "novalue"])
        with self.assertRaises(ConfigError):
            apply_overrides({}, args)

    def test_config_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "run.yaml")
            with open(path, "w", encoding="utf-8") as f:
                yaml.safe_dump({"seed": 5, "estimate": {"method": "kernel"}}, f)
            args = create_parser().parse_args(["simulate", "--config", path])
            config = resolve_config(args)
            self.assertEqual(config.seed, 5)
            self.assertEqual(config.estimate.method, "kernel")

            with open(path, "w", encoding="utf-8") as f:
                f.write("- a\n- b\n")
            with self.assertRaises(ConfigError):
                load_config_file(path)
        with self.assertRaises(ConfigError):
            load_config_file(os.path.join(tmp, "absent.yaml"))

    def test_quantile_contrast(self):
        W = np.random.default_rng(0).gamma(2.0, size=(200, 3))
        labelled = resolve_contrast(ContrastSection(), W)
        explicit = ExposureContrast.from_quantiles(W)
        np.testing.assert_array_equal(labelled.w0, explicit.w0)
        np.testing.assert_array_equal(labelled.w1, explicit.w1)

        explicit_lists = resolve_contrast(ContrastSection([0.0, 0.0, 0.0], [1.0, 2.0, 3.0]), W)
        np.testing.assert_array_equal(explicit_lists.w1, [1.0, 2.0, 3.0])
        with self.assertRaises(ConfigError):
            resolve_contrast(ContrastSection([0.0], [1.0]), W)


class TestCliMain(unittest.TestCase):
    """Test cases for the CLI main function."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    @patch("sys.stdout", new_callable=StringIO)
    @patch("sys.stderr", new_callable=StringIO)
    def test_config_error_record(self, mock_stderr, mock_stdout):
        result = main(["fit", "--out", self.tmp.name])
        self.assertEqual(result, 2)
        record = json.loads(mock_stderr.getvalue().strip().splitlines()[-1])
        self.assertEqual(record["error"], "ConfigError")
        self.assertIn("data.path is required", record["details"]["problems"])
        self.assertEqual(mock_stdout.getvalue(), "")

    @patch("sepbart.cli.cmd_simulate")
    @patch("sys.stdout", new_callable=StringIO)
    @patch("sys.stderr", new_callable=StringIO)
    def test_failed_run(self, mock_stderr, mock_stdout, mock_simulate):
        mock_simulate.side_effect = DatasetError("bad data", {"row": 3})
        self.assertEqual(main(["simulate", "--out", self.tmp.name]), 1)
        record = json.loads(mock_stderr.getvalue().strip().splitlines()[-1])
        self.assertEqual(record, {"error": "DatasetError", "message": "bad data", "details": {"row": 3}})

    @patch("sys.stdout", new_callable=StringIO)
    @patch("sys.stderr", new_callable=StringIO)
    def test_empty_data_file(self, mock_stderr, mock_stdout):
        path = os.path.join(self.tmp.name, "empty.csv")
        open(path, "w").close()
        result = main(["fit", "--out", self.tmp.name, "--set", f"data.path={path}",
                       "--set", "data.covariates=[x1]", "--set", "data.exposures=[w1]"])
        self.assertEqual(result, 1)
        record = json.loads(mock_stderr.getvalue().strip().splitlines()[-1])
        self.assertEqual(record["error"], "DatasetError")
        self.assertIn("empty", record["message"])

    @patch("sepbart.cli.replicate_study")
    @patch("sys.stdout", new_callable=StringIO)
    @patch("sys.stderr", new_callable=StringIO)
    def test_missing_external_predictions(self, mock_stderr, mock_stdout, mock_study):
        missing = os.path.join(self.tmp.name, "bkmr.csv")
        result = main(["study", "--out", self.tmp.name, "--set", f"study.external={missing}"])
        self.assertEqual(result, 1)
        record = json.loads(mock_stderr.getvalue().strip().splitlines()[-1])
        self.assertEqual(record["error"], "DatasetError")
        self.assertEqual(record["details"], {"path": missing})
        mock_study.assert_not_called()

    @patch("sepbart.cli.cmd_simulate")
    @patch("sys.stdout", new_callable=StringIO)
    @patch("sys.stderr", new_callable=StringIO)
    def test_unexpected_failure_record(self, mock_stderr, mock_stdout, mock_simulate):
        mock_simulate.side_effect = RuntimeError("boom")
        self.assertEqual(main(["simulate", "--out", self.tmp.name]), 1)
        record = json.loads(mock_stderr.getvalue().strip().splitlines()[-1])
        self.assertEqual(record, {"error": "RuntimeError", "message": "boom", "details": {}})

    @patch("sepbart.cli.cmd_simulate")
    @patch("sys.stdout", new_callable=StringIO)
    @patch("sys.stderr", new_callable=StringIO)
    def test_interrupted(self, mock_stderr, mock_stdout, mock_simulate):
        mock_simulate.side_effect = KeyboardInterrupt
        self.assertEqual(main(["simulate", "--out", self.tmp.name]), 130)
        self.assertIn("KeyboardInterrupt", mock_stderr.getvalue())

    @patch("sepbart.cli.cmd_study")
    @patch("sys.stdout", new_callable=StringIO)
    def test_study_flags(self, mock_stdout, mock_study):
        mock_study.return_value = {"report": "study.json"}
        self.assertEqual(main(["study", "--scenario", "none", "--replicates", "2",
                               "--out", self.tmp.name]), 0)
        config = mock_study.call_args[0][0]
        self.assertEqual(config.simulate.scenario, "none")
        self.assertEqual(config.study.replicates, 2)
        self.assertEqual(json.loads(mock_stdout.getvalue())["command"], "study")

    @patch("sys.stdout", new_callable=StringIO)
    def test_simulate_deterministic(self, mock_stdout):
        argv = ["simulate", "--seed", "7", "--out", self.tmp.name, "--set", "simulate.n=80"]
        self.assertEqual(main(argv), 0)
        with open(os.path.join(self.tmp.name, "data.csv"), "rb") as f:
            first = f.read()
        self.assertEqual(main(argv), 0)
        with open(os.path.join(self.tmp.name, "data.csv"), "rb") as f:
            self.assertEqual(f.read(), first)

        frame = pd.read_csv(os.path.join(self.tmp.name, "data.csv"))
        self.assertEqual(len(frame), 80)
        self.assertEqual(set(frame["seed"]), {7})
        with open(os.path.join(self.tmp.name, "truth.json"), "r", encoding="utf-8") as f:
            truth = json.load(f)
        self.assertEqual(truth["seed"], 7)
        self.assertEqual(truth["config_hash"], frame["config_hash"].iloc[0])
        self.assertEqual(len(truth["truth"]["psi"]), 5)


class TestCliEndToEnd(unittest.TestCase):
    """Simulate, fit, estimate and diagnose with a tiny configuration."""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        out = cls.tmp.name
        cls.config_path = os.path.join(out, "run.yaml")
        config = {
            "seed": 7,
            "out": out,
            "simulate": {"scenario": "strong", "n": 60},
            "data": {"path": os.path.join(out, "data.csv"), "outcome": "y",
                     "covariates": [f"x{j}" for j in range(1, 6)],
                     "exposures": [f"w{j}" for j in range(1, 6)]},
            "fit": {"iterations": 24, "burn_in": 12, "thin": 1, "trees_f": 3, "trees_g": 3,
                    "trees_h": 2, "chains": 2, "log_every": 12},
            "estimate": {"method": "mean", "num_points": 5, "grid_points": 3},
        }
        with open(cls.config_path, "w", encoding="utf-8") as f:
            yaml.safe_dump(config, f)
        with patch("sys.stdout", new_callable=StringIO):
            assert main(["simulate", "--config", cls.config_path]) == 0
            assert main(["fit", "--config", cls.config_path]) == 0
        cls.draws = [os.path.join(out, f"draws-chain{c}.jsonl") for c in range(2)]

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def read_json(self, name):
        with open(os.path.join(self.tmp.name, name), "r", encoding="utf-8") as f:
            return json.load(f)

    def read_bytes(self, path):
        with open(path, "rb") as f:
            return f.read()

    def test_fit_outputs(self):
        summary = self.read_json("fit.json")
        self.assertEqual([c["chain"] for c in summary["chains"]], [0, 1])
        self.assertEqual(summary["chains"][0]["num_draws"], 12)
        self.assertEqual(summary["seed"], 7)
        for path in self.draws:
            self.assertTrue(os.path.exists(path))

    @patch("sys.stdout", new_callable=StringIO)
    def test_estimate(self, mock_stdout):
        before = [self.read_bytes(p) for p in self.draws]
        self.assertEqual(main(["estimate", "--config", self.config_path] + self.draws), 0)
        self.assertEqual([self.read_bytes(p) for p in self.draws], before)

        report = self.read_json("estimate.json")
        self.assertEqual(report["num_draws"], 24)
        self.assertLessEqual(report["ate"]["lower"], report["ate"]["upper"])
        self.assertEqual(report["vim"]["num_draws"], 24)
        self.assertEqual(len(report["tests"]), 10)

        cate = pd.read_csv(os.path.join(self.tmp.name, "cate.csv"))
        self.assertEqual(len(cate), 5)
        self.assertTrue((cate["lower"] <= cate["upper"]).all())
        self.assertEqual(cate["config_hash"].iloc[0], report["config_hash"])
        curves = pd.read_csv(os.path.join(self.tmp.name, "curves.csv"))
        self.assertEqual(len(curves), 15)

    @patch("sys.stdout", new_callable=StringIO)
    def test_diagnose(self, mock_stdout):
        self.assertEqual(main(["diagnose", "--config", self.config_path] + self.draws), 0)
        report = self.read_json("diagnose.json")
        self.assertIn("ate", report["psrf"])
        self.assertIn("sigma", report["psrf"])
        self.assertIn("all", report["positivity"]["proportions"])
        self.assertIn("mean", report["trimmed_ate"])

    @patch("sys.stdout", new_callable=StringIO)
    def test_diagnose_single_chain(self, mock_stdout):
        out = os.path.join(self.tmp.name, "single")
        self.assertEqual(main(["diagnose", "--config", self.config_path, "--out", out,
                               self.draws[0]]), 0)
        with open(os.path.join(out, "diagnose.json"), "r", encoding="utf-8") as f:
            report = json.load(f)
        self.assertIn("error", report["psrf"])


if __name__ == "__main__":
    unittest.main()
