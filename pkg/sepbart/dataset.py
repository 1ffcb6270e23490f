"""
Data ingestion and quantile normalization.

Covariates and exposures are mapped column by column to their empirical
quantiles in (0, 1]; the outcome is standardized. The column means of the
normalized matrices are the anchors used by the identification step of the
model and by every estimand downstream.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from .errors import DatasetError

logger = logging.getLogger(__name__)


@dataclass
class Dataset:
    """Outcome, covariates and exposures for n observations."""
    y: np.ndarray
    X: np.ndarray
    W: np.ndarray
    covariate_names: List[str] = field(default_factory=list)
    exposure_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        self.X = np.asarray(self.X, dtype=float)
        self.W = np.asarray(self.W, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        if self.W.ndim == 1:
            self.W = self.W[:, None]

        n = self.y.shape[0]
        if n < 2:
            raise DatasetError("a dataset needs at least 2 observations", {"n": n})
        if self.X.shape[0] != n or self.W.shape[0] != n:
            raise DatasetError(
                "outcome, covariates and exposures have different row counts",
                {"y": n, "X": self.X.shape[0], "W": self.W.shape[0]},
            )
        if self.X.shape[1] < 1 or self.W.shape[1] < 1:
            raise DatasetError("at least one covariate and one exposure are required")
        for name, arr in (("y", self.y), ("X", self.X), ("W", self.W)):
            if not np.all(np.isfinite(arr)):
                raise DatasetError(f"{name} contains missing or non-finite values")

        if not self.covariate_names:
            self.covariate_names = [f"x{j + 1}" for j in range(self.p)]
        if not self.exposure_names:
            self.exposure_names = [f"w{j + 1}" for j in range(self.q)]
        if len(self.covariate_names) != self.p or len(self.exposure_names) != self.q:
            raise DatasetError("column name lists do not match matrix widths")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.W.shape[1]

    def subset(self, rows: Sequence[int]) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.y[rows], self.X[rows], self.W[rows],
                       list(self.covariate_names), list(self.exposure_names))

    def to_frame(self, outcome_name: str = "y") -> pd.DataFrame:
        frame = pd.DataFrame({outcome_name: self.y})
        for j, name in enumerate(self.covariate_names):
            frame[name] = self.X[:, j]
        for j, name in enumerate(self.exposure_names):
            frame[name] = self.W[:, j]
        return frame


@dataclass
class QuantileMap:
    """
    Monotone map between raw values of one column and their quantiles.

    The knots are the sorted distinct observed values and the quantile each
    of them received; values in between are linearly interpolated and values
    outside the observed range are clamped to the end knots.
    """
    raw_knots: np.ndarray
    quantile_knots: np.ndarray

    def forward(self, values: np.ndarray) -> np.ndarray:
        return np.interp(np.asarray(values, dtype=float), self.raw_knots, self.quantile_knots)

    def inverse(self, quantiles: np.ndarray) -> np.ndarray:
        return np.interp(np.asarray(quantiles, dtype=float), self.quantile_knots, self.raw_knots)

    def to_dict(self) -> Dict[str, Any]:
        return {"raw": self.raw_knots.tolist(), "quantile": self.quantile_knots.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "QuantileMap":
        return cls(np.asarray(data["raw"], dtype=float), np.asarray(data["quantile"], dtype=float))


@dataclass
class NormalizationInfo:
    """Everything needed to move between raw and model scales."""
    covariate_maps: List[QuantileMap]
    exposure_maps: List[QuantileMap]
    outcome_center: float
    outcome_scale: float
    x_anchor: np.ndarray
    w_anchor: np.ndarray

    def transform_covariates(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.column_stack([m.forward(X[:, j]) for j, m in enumerate(self.covariate_maps)])

    def transform_exposures(self, W: np.ndarray) -> np.ndarray:
        W = np.atleast_2d(np.asarray(W, dtype=float))
        return np.column_stack([m.forward(W[:, j]) for j, m in enumerate(self.exposure_maps)])

    def inverse_covariates(self, U: np.ndarray) -> np.ndarray:
        U = np.atleast_2d(np.asarray(U, dtype=float))
        return np.column_stack([m.inverse(U[:, j]) for j, m in enumerate(self.covariate_maps)])

    def inverse_exposures(self, U: np.ndarray) -> np.ndarray:
        U = np.atleast_2d(np.asarray(U, dtype=float))
        return np.column_stack([m.inverse(U[:, j]) for j, m in enumerate(self.exposure_maps)])

    def standardize_outcome(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.outcome_center) / self.outcome_scale

    def restore_outcome(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.outcome_scale + self.outcome_center

    def to_dict(self) -> Dict[str, Any]:
        return {
            "covariate_maps": [m.to_dict() for m in self.covariate_maps],
            "exposure_maps": [m.to_dict() for m in self.exposure_maps],
            "outcome_center": self.outcome_center,
            "outcome_scale": self.outcome_scale,
            "x_anchor": self.x_anchor.tolist(),
            "w_anchor": self.w_anchor.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NormalizationInfo":
        return cls(
            covariate_maps=[QuantileMap.from_dict(m) for m in data["covariate_maps"]],
            exposure_maps=[QuantileMap.from_dict(m) for m in data["exposure_maps"]],
            outcome_center=float(data["outcome_center"]),
            outcome_scale=float(data["outcome_scale"]),
            x_anchor=np.asarray(data["x_anchor"], dtype=float),
            w_anchor=np.asarray(data["w_anchor"], dtype=float),
        )


def quantile_column(values: np.ndarray) -> np.ndarray:
    """Empirical quantiles rank/n with mid-ranks for ties."""
    values = np.asarray(values, dtype=float)
    return rankdata(values, method="average") / values.shape[0]


def _column_map(values: np.ndarray, quantiles: np.ndarray) -> QuantileMap:
    raw_knots, first = np.unique(values, return_index=True)
    return QuantileMap(raw_knots, quantiles[first])


def normalize(ds: Dataset) -> Tuple[Dataset, NormalizationInfo]:
    """
    Quantile-normalize covariates and exposures and standardize the outcome.

    Args:
        ds: Raw dataset

    Returns:
        Tuple of (normalized dataset, normalization info)

    Raises:
        DatasetError: if any column (or the outcome) is constant
    """
    for names, matrix in ((ds.covariate_names, ds.X), (ds.exposure_names, ds.W)):
        for j, name in enumerate(names):
            if np.ptp(matrix[:, j]) == 0.0:
                raise DatasetError(f"column '{name}' is constant", {"column": name})
    scale = float(np.std(ds.y, ddof=1))
    if scale == 0.0:
        raise DatasetError("outcome is constant", {"column": "y"})
    center = float(np.mean(ds.y))

    Xq = np.column_stack([quantile_column(ds.X[:, j]) for j in range(ds.p)])
    Wq = np.column_stack([quantile_column(ds.W[:, j]) for j in range(ds.q)])

    info = NormalizationInfo(
        covariate_maps=[_column_map(ds.X[:, j], Xq[:, j]) for j in range(ds.p)],
        exposure_maps=[_column_map(ds.W[:, j], Wq[:, j]) for j in range(ds.q)],
        outcome_center=center,
        outcome_scale=scale,
        x_anchor=Xq.mean(axis=0),
        w_anchor=Wq.mean(axis=0),
    )
    z = (ds.y - center) / scale
    # exact zero mean after floating-point scaling
    z = z - z.mean()
    normalized = Dataset(z, Xq, Wq, list(ds.covariate_names), list(ds.exposure_names))
    logger.debug("normalized dataset n=%d p=%d q=%d", ds.n, ds.p, ds.q)
    return normalized, info


def load_csv(path: str, outcome_col: str, covariate_cols: Sequence[str],
             exposure_cols: Sequence[str]) -> Dataset:
    """
    Load a dataset from a CSV file with a header row.

    Args:
        path: CSV file path (UTF-8, comma-delimited, '.' decimal separator)
        outcome_col: Name of the outcome column
        covariate_cols: Names of the covariate columns
        exposure_cols: Names of the exposure columns

    Returns:
        Dataset with rows in file order

    Raises:
        DatasetError: on missing columns, non-numeric cells or missing values
    """
    try:
        frame = pd.read_csv(path, encoding="utf-8", dtype=str, keep_default_na=False)
    except FileNotFoundError as exc:
        raise DatasetError(f"file not found: {path}", {"path": str(path)}) from exc
    except pd.errors.EmptyDataError as exc:
        raise DatasetError(f"file is empty: {path}", {"path": str(path)}) from exc
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DatasetError(f"cannot parse {path}: {exc}", {"path": str(path)}) from exc

    wanted = [outcome_col] + list(covariate_cols) + list(exposure_cols)
    missing = [c for c in wanted if c not in frame.columns]
    if missing:
        raise DatasetError(f"missing column(s): {', '.join(missing)}", {"missing": missing})

    columns = {}
    for col in wanted:
        raw = frame[col].str.strip()
        empty = raw == ""
        if empty.any():
            row = int(np.flatnonzero(empty.to_numpy())[0])
            raise DatasetError(
                f"missing value in column '{col}' at data row {row + 1}",
                {"column": col, "row": row + 1},
            )
        values = np.empty(len(raw))
        for row, cell in enumerate(raw):
            try:
                values[row] = float(cell)
            except ValueError:
                raise DatasetError(
                    f"non-numeric value {cell!r} in column '{col}' at data row {row + 1}",
                    {"column": col, "row": row + 1, "value": cell},
                ) from None
        if not np.all(np.isfinite(values)):
            row = int(np.flatnonzero(~np.isfinite(values))[0])
            raise DatasetError(
                f"missing value in column '{col}' at data row {row + 1}",
                {"column": col, "row": row + 1},
            )
        columns[col] = values

    return Dataset(
        y=columns[outcome_col],
        X=np.column_stack([columns[c] for c in covariate_cols]),
        W=np.column_stack([columns[c] for c in exposure_cols]),
        covariate_names=list(covariate_cols),
        exposure_names=list(exposure_cols),
    )


def save_csv(ds: Dataset, path: str, outcome_name: str = "y") -> None:
    """Write a dataset so that `load_csv` reads back identical floats."""
    ds.to_frame(outcome_name).to_csv(path, index=False, float_format=lambda v: repr(float(v)))
