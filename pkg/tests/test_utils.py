"""
Tests for the utility functions.

This module tests the helpers used across the package: posterior
summaries, JSON conversion, provenance hashing, atomic writes, config
parsing and the order-preserving parallel map.
"""

import json
import os
import tempfile
import unittest
from dataclasses import dataclass
from unittest.mock import patch

import numpy as np

from sepbart.errors import ConfigError
from sepbart.utils import (
    atomic_write_text,
    config_hash,
    dataclass_from_mapping,
    parallel_map,
    require_valid,
    summarize,
    to_jsonable,
    write_json,
)


def square(x):
    return x * x


@dataclass
class Options:
    count: int = 3
    rate: float = 0.5
    enabled: bool = False
    name: str = "a"


class TestUtils(unittest.TestCase):
    """Test cases for the utility functions."""

    def test_summarize(self):
        summary = summarize(np.arange(101, dtype=float), level=0.9)
        self.assertEqual(summary["mean"], 50.0)
        self.assertAlmostEqual(summary["lower"], 5.0)
        self.assertAlmostEqual(summary["upper"], 95.0)
        self.assertEqual(summarize([2.0])["sd"], 0.0)

    def test_to_jsonable(self):
        data = to_jsonable({"a": np.float64(1.5), "b": np.arange(3), 4: (float("inf"), float("nan")),
                            "opts": Options()})
        self.assertEqual(data, {"a": 1.5, "b": [0, 1, 2], "4": ["inf", None],
                                "opts": {"count": 3, "rate": 0.5, "enabled": False, "name": "a"}})
        json.dumps(data)

    def test_config_hash(self):
        a = config_hash({"seed": 1, "fit": {"iterations": 10, "thin": 2}})
        b = config_hash({"fit": {"thin": 2, "iterations": 10}, "seed": 1})
        c = config_hash({"seed": 2, "fit": {"iterations": 10, "thin": 2}})
        self.assertEqual(a, b)
        self.assertNotEqual(a, c)
        self.assertEqual(len(a), 64)

    def test_atomic_write(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "sub", "out.txt")
            atomic_write_text(path, "first")
            atomic_write_text(path, "second")
            with open(path, "r", encoding="utf-8") as f:
                self.assertEqual(f.read(), "second")

            with patch("sepbart.utils.os.replace", side_effect=OSError("disk full")):
                with self.assertRaises(OSError):
                    atomic_write_text(path, "third")
            with open(path, "r", encoding="utf-8") as f:
                self.assertEqual(f.read(), "second")
            self.assertEqual(os.listdir(os.path.dirname(path)), ["out.txt"])

    def test_write_json(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "report.json")
            write_json(path, {"psrf": float("inf"), "values": np.ones(2)})
            with open(path, "r", encoding="utf-8") as f:
                self.assertEqual(json.load(f), {"psrf": "inf", "values": [1.0, 1.0]})

    def test_dataclass_from_mapping(self):
        options, problems = dataclass_from_mapping(Options, {"count": 4.0, "rate": 1, "name": "b"})
        self.assertEqual(problems, [])
        self.assertEqual(options, Options(count=4, rate=1.0, name="b"))
        self.assertIsInstance(options.count, int)
        self.assertIsInstance(options.rate, float)

    def test_dataclass_from_mapping_problems(self):
        options, problems = dataclass_from_mapping(
            Options, {"count": 2.5, "enabled": "yes", "colour": "red"}, "opts.")
        self.assertEqual(options, Options())
        self.assertEqual(len(problems), 3)
        self.assertIn("opts.colour: unknown key", problems)

    def test_require_valid(self):
        require_valid([])
        with self.assertRaises(ConfigError) as ctx:
            require_valid(["a", "b"])
        self.assertEqual(ctx.exception.problems, ["a", "b"])

    def test_parallel_map_order(self):
        items = list(range(8))
        self.assertEqual(parallel_map(square, items), [x * x for x in items])
        self.assertEqual(parallel_map(square, items, workers=2), [x * x for x in items])
        self.assertEqual(parallel_map(square, [], workers=2), [])


if __name__ == "__main__":
    unittest.main()
