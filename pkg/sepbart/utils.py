"""
Utility functions for SepBART.

This module provides helpers used across the package: posterior summaries,
provenance hashing, atomic file output, JSON conversion and parallel mapping.
"""

import concurrent.futures
import dataclasses
import hashlib
import json
import os
import tempfile
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Type, TypeVar

import numpy as np

from .errors import ConfigError

T = TypeVar("T")


def summarize(samples: Sequence[float], level: float = 0.95) -> Dict[str, float]:
    """
    Posterior summary with an equal-tailed credible interval.

    Args:
        samples: Per-draw values
        level: Interval coverage

    Returns:
        Dictionary with mean, sd, lower and upper
    """
    values = np.asarray(samples, dtype=float)
    tail = (1.0 - level) / 2.0
    return {
        "mean": float(values.mean()),
        "sd": float(values.std(ddof=1)) if values.size > 1 else 0.0,
        "lower": float(np.quantile(values, tail)),
        "upper": float(np.quantile(values, 1.0 - tail)),
    }


def to_jsonable(obj: Any) -> Any:
    """Recursively convert numpy values and dataclasses into JSON-ready objects."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None if np.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def canonical_json(obj: Any) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"))


def config_hash(config: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON encoding of a resolved configuration."""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def atomic_write_text(path: str, text: str) -> None:
    """Write to a temporary file in the target directory, then rename over `path`."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_json(path: str, obj: Any) -> None:
    atomic_write_text(path, json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n")


def dataclass_from_mapping(cls: Type[T], mapping: Dict[str, Any], prefix: str = "") -> Tuple[T, List[str]]:
    """
    Build a dataclass from a mapping, collecting unknown keys and bad types.

    Unknown keys and badly typed values are left out, so the instance holds
    defaults for them and can still be validated.

    Returns:
        Tuple of (instance, list of problems)
    """
    fields = {f.name: f for f in dataclasses.fields(cls)}
    problems = [f"{prefix}{key}: unknown key" for key in mapping if key not in fields]
    kwargs = {}
    for key, value in mapping.items():
        if key not in fields:
            continue
        default = getattr(cls, key, None)
        try:
            if isinstance(default, bool):
                if not isinstance(value, bool):
                    raise TypeError("expected true/false")
            elif isinstance(default, int):
                if isinstance(value, bool) or int(value) != value:
                    raise TypeError("expected an integer")
                value = int(value)
            elif isinstance(default, float):
                value = float(value)
        except (TypeError, ValueError) as exc:
            problems.append(f"{prefix}{key}: {exc}")
            continue
        kwargs[key] = value
    return cls(**kwargs), problems


def require_valid(problems: List[str]) -> None:
    if problems:
        raise ConfigError(problems)


def parallel_map(fn: Callable[[Any], T], items: Sequence[Any], workers: int = 1) -> List[T]:
    """
    Apply `fn` to every item, in worker processes when workers > 1.

    Results are returned in input order regardless of completion order.
    """
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    results: List[Optional[T]] = [None] * len(items)
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as executor:
        future_to_index = {executor.submit(fn, item): i for i, item in enumerate(items)}
        for future in concurrent.futures.as_completed(future_to_index):
            results[future_to_index[future]] = future.result()
    return results

