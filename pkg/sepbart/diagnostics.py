"""
Convergence and overlap diagnostics.

psrf compares between- and within-chain variability of a scalar trace.
positivity_report models each exposure given the covariates as Gaussian
with a cubic additive mean and measures the probability of landing near the
two contrast levels; trimmed_ate restricts the ATE to the half of the sample
where that probability is largest.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm

from .dataset import Dataset
from .errors import DiagnosticsError, EstimandError
from .estimands import ExposureContrast, ate_draws, training_cate_draws
from .model import PosteriorSamples
from .utils import summarize

logger = logging.getLogger(__name__)

DEFAULT_WINDOWS = ((0.15, 0.35), (0.65, 0.85))
DEFAULT_DELTA = 0.01
POLY_DEGREE = 3
MIN_TRACE_LENGTH = 10


def psrf(chains: Sequence[Sequence[float]]) -> float:
    """
    Potential scale reduction factor of a scalar functional.

    Args:
        chains: One trace per chain, all of the same length

    Returns:
        sqrt((W (m - 1)/m + B/m) / W); +inf when the chains are constant
        but disagree, 1.0 when they are constant and agree

    Raises:
        DiagnosticsError: with fewer than 2 chains or unequal/short traces
    """
    traces = [np.asarray(c, dtype=float) for c in chains]
    if len(traces) < 2:
        raise DiagnosticsError("PSRF needs at least 2 chains", {"chains": len(traces)})
    lengths = {t.size for t in traces}
    if len(lengths) != 1:
        raise DiagnosticsError("PSRF needs chains of equal length", {"lengths": sorted(lengths)})
    m = lengths.pop()
    if m < MIN_TRACE_LENGTH:
        raise DiagnosticsError(f"PSRF needs traces of length >= {MIN_TRACE_LENGTH}", {"length": m})

    values = np.vstack(traces)
    within = float(np.mean(np.var(values, axis=1, ddof=1)))
    between = float(m * np.var(values.mean(axis=1), ddof=1))
    if within == 0.0:
        return float("inf") if between > 0.0 else 1.0
    return float(np.sqrt((within * (m - 1) / m + between / m) / within))


def ate_psrf(chains: Sequence[PosteriorSamples], contrast: ExposureContrast) -> float:
    """PSRF of the per-draw ATE trace."""
    return psrf([ate_draws(c, contrast) for c in chains])


@dataclass
class PositivityReport:
    """Per-observation probabilities of exposures near each contrast level."""
    p0: np.ndarray
    p1: np.ndarray
    delta: float
    windows0: np.ndarray
    windows1: np.ndarray
    exposure_names: List[str] = field(default_factory=list)

    @property
    def marginal_pass(self) -> np.ndarray:
        """(n, q) flags min(p_0j, p_1j) > delta."""
        return np.minimum(self.p0, self.p1) > self.delta

    @property
    def joint_pass(self) -> np.ndarray:
        return self.marginal_pass.all(axis=1)

    @property
    def joint_p0(self) -> np.ndarray:
        return np.prod(self.p0, axis=1)

    @property
    def joint_p1(self) -> np.ndarray:
        return np.prod(self.p1, axis=1)

    @property
    def joint_min(self) -> np.ndarray:
        return np.minimum(self.joint_p0, self.joint_p1)

    def proportions(self) -> Dict[str, float]:
        props = {name: float(v) for name, v in zip(self.exposure_names, self.marginal_pass.mean(axis=0))}
        props["all"] = float(self.joint_pass.mean())
        return props

    def to_dict(self, include_observations: bool = False) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "delta": self.delta,
            "windows0": self.windows0.tolist(),
            "windows1": self.windows1.tolist(),
            "exposure_names": list(self.exposure_names),
            "proportions": self.proportions(),
            "joint_min_median": float(np.median(self.joint_min)),
        }
        if include_observations:
            data["observations"] = {
                "p0": self.p0.tolist(),
                "p1": self.p1.tolist(),
                "joint_min": self.joint_min.tolist(),
                "joint_pass": self.joint_pass.tolist(),
            }
        return data


def polynomial_design(X: np.ndarray, degree: int = POLY_DEGREE) -> np.ndarray:
    """Intercept plus powers 1..degree of every standardized covariate, no cross terms."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    sd = X.std(axis=0)
    Z = (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    columns = [np.ones(X.shape[0])]
    for j in range(Z.shape[1]):
        for power in range(1, degree + 1):
            columns.append(Z[:, j] ** power)
    return np.column_stack(columns)


def exposure_windows(W: np.ndarray, windows: Sequence[Tuple[float, float]] = DEFAULT_WINDOWS
                     ) -> Tuple[np.ndarray, np.ndarray]:
    """Per-exposure intervals between the quantiles of each window, shape (q, 2) each."""
    (a0, b0), (a1, b1) = windows
    W = np.atleast_2d(W)
    low = np.column_stack([np.quantile(W, a0, axis=0), np.quantile(W, b0, axis=0)])
    high = np.column_stack([np.quantile(W, a1, axis=0), np.quantile(W, b1, axis=0)])
    return low, high


def positivity_report(ds: Dataset, contrast: Optional[ExposureContrast] = None,
                      delta: float = DEFAULT_DELTA,
                      windows: Sequence[Tuple[float, float]] = DEFAULT_WINDOWS) -> PositivityReport:
    """
    Univariate and joint positivity assessment on the raw data.

    Args:
        ds: Raw dataset
        contrast: Contrast whose levels the windows should contain (checked, logged)
        delta: Threshold on min(p_0j, p_1j)
        windows: Quantile pairs defining the intervals around w0 and w1

    Returns:
        PositivityReport

    Raises:
        DiagnosticsError: if the regression of an exposure on the covariates is rank deficient
    """
    design = polynomial_design(ds.X)
    k = design.shape[1]
    if ds.n - k < 1:
        raise DiagnosticsError("positivity regression has more terms than observations",
                               {"columns": k, "n": ds.n})
    low, high = exposure_windows(ds.W, windows)
    if contrast is not None:
        for label, level, bounds in (("w0", contrast.w0, low), ("w1", contrast.w1, high)):
            outside = [ds.exposure_names[j] for j in range(ds.q)
                       if not bounds[j, 0] <= level[j] <= bounds[j, 1]]
            if outside:
                logger.warning("contrast level %s lies outside its positivity window for %s",
                               label, ", ".join(outside))

    p0 = np.empty((ds.n, ds.q))
    p1 = np.empty((ds.n, ds.q))
    for j, name in enumerate(ds.exposure_names):
        coef, _, rank, _ = np.linalg.lstsq(design, ds.W[:, j], rcond=None)
        if rank < k:
            raise DiagnosticsError(f"positivity regression for exposure '{name}' is rank deficient",
                                   {"exposure": name})
        mean = design @ coef
        sd = float(np.sqrt(np.sum((ds.W[:, j] - mean) ** 2) / (ds.n - k)))
        if sd == 0.0:
            raise DiagnosticsError(f"exposure '{name}' is a deterministic function of the covariates",
                                   {"exposure": name})
        p0[:, j] = norm.cdf((low[j, 1] - mean) / sd) - norm.cdf((low[j, 0] - mean) / sd)
        p1[:, j] = norm.cdf((high[j, 1] - mean) / sd) - norm.cdf((high[j, 0] - mean) / sd)

    report = PositivityReport(p0, p1, delta, low, high, list(ds.exposure_names))
    logger.info("positivity: %.3f of observations pass for every exposure", report.joint_pass.mean())
    return report


def trimmed_ate_draws(samples: PosteriorSamples, report: PositivityReport,
                      contrast: ExposureContrast) -> np.ndarray:
    """
    Per-draw ATE over observations with min(p_0, p_1) above its sample median.

    Raises:
        EstimandError: if no observation is strictly above the median
    """
    if report.p0.shape[0] != samples.X.shape[0]:
        raise DiagnosticsError("positivity report and posterior draws cover different observations",
                               {"report": report.p0.shape[0], "draws": samples.X.shape[0]})
    score = report.joint_min
    keep = np.flatnonzero(score > np.median(score))
    if keep.size == 0:
        raise EstimandError("trimmed set is empty (min(p0, p1) has no values above its median)")
    return training_cate_draws(samples, contrast, keep).mean(axis=1)


def trimmed_ate(samples: PosteriorSamples, report: PositivityReport, contrast: ExposureContrast,
                level: float = 0.95) -> Dict[str, float]:
    return summarize(trimmed_ate_draws(samples, report, contrast), level)
