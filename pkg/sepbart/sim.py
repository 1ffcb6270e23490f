"""
Simulation scenarios with known ground truth, and the replicate study driver.

Five covariates X ~ N(0, I) drive the mean of five correlated exposures
W | X ~ N(mu(X), Sigma). The outcome is

    Y = f*(X) + g*(W) + h*(X, W) + eps,   eps ~ N(0, 1)

where the interaction is h*(X, W) = S(X) g*(W) with a scenario-specific
modifier S. The effect relative to w0 is therefore
tau*(x, w) = G(w) (1 + S(x)) with G(w) = g*(w) - g*(w0).
"""

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import integrate
from scipy.special import expit
from scipy.stats import norm

from .dataset import Dataset, normalize
from .errors import DatasetError, SepBartError
from .estimands import (
    CallableEffect,
    ExposureContrast,
    cate_draws,
    ate_draws,
    rejection_matrix,
    vim,
    vim_effects,
)
from .model import AdditiveEffect, FitConfig, fit, merge_chains
from .utils import parallel_map, summarize

logger = logging.getLogger(__name__)

NUM_COVARIATES = 5
NUM_EXPOSURES = 5
EXPOSURE_CORRELATION = 0.3
SCENARIOS = ("none", "moderate", "strong", "violation1", "violation2")
ADDITIVE_STRENGTH = {"none": 0.0, "moderate": 0.2, "strong": 0.4}
VIOLATION1_SCALE = 0.5
VIOLATION2_SCALE = 0.35
DEFAULT_W0 = -0.5
DEFAULT_W1 = 0.5
MODES = ("block", "compare")


@dataclass
class Scenario:
    """One simulation setting."""
    tag: str = "strong"
    n: int = 2000
    seed: int = 0

    def validate(self) -> List[str]:
        problems = []
        if self.tag not in SCENARIOS:
            problems.append(f"scenario must be one of {', '.join(SCENARIOS)}")
        if self.n < 50:
            problems.append("n must be >= 50")
        return problems

    @property
    def is_additive(self) -> bool:
        return self.tag in ADDITIVE_STRENGTH


def default_contrast() -> ExposureContrast:
    return ExposureContrast(np.full(NUM_EXPOSURES, DEFAULT_W0), np.full(NUM_EXPOSURES, DEFAULT_W1))


def exposure_mean(X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(X)
    return np.column_stack([
        expit(X[:, 0]) - 0.5,
        0.1 * X[:, 1] ** 2 - 0.1,
        0.3 * X[:, 2],
        np.sin(X[:, 1]),
        0.05 * X[:, 3] ** 3,
    ])


def exposure_covariance() -> np.ndarray:
    cov = np.full((NUM_EXPOSURES, NUM_EXPOSURES), EXPOSURE_CORRELATION)
    np.fill_diagonal(cov, 1.0)
    return cov


def f_true(X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(X)
    return X[:, 0] + X[:, 1] - 0.5 * X[:, 2]


def g_true(W: np.ndarray) -> np.ndarray:
    W = np.atleast_2d(W)
    return ((W[:, 0] > 0).astype(float)
            + W[:, 0] * np.exp(0.3 * W[:, 2])
            + np.arctan(W[:, 1])
            + np.sin(W[:, 1] * W[:, 2] * np.pi)
            + np.minimum(np.abs(W[:, 2]), 1.0))


def modifier_terms(tag: str, X: np.ndarray) -> np.ndarray:
    """Per-covariate terms of an additive modifier, shape (n, p); zero columns for unused covariates."""
    X = np.atleast_2d(X)
    c = ADDITIVE_STRENGTH[tag]
    terms = np.zeros_like(X, dtype=float)
    terms[:, 0] = c * np.arctan(4.0 * X[:, 0])
    terms[:, 1] = c * np.cos(np.pi * X[:, 1])
    return terms


def modifier(tag: str, X: np.ndarray) -> np.ndarray:
    """S(x) with h*(x, w) = S(x) g*(w)."""
    X = np.atleast_2d(X)
    if tag in ADDITIVE_STRENGTH:
        return modifier_terms(tag, X).sum(axis=1)
    if tag == "violation1":
        return VIOLATION1_SCALE * np.cos(X[:, 0]) * np.cos(X[:, 1])
    return VIOLATION2_SCALE * ((X[:, 0] < 1.0) & (X[:, 1] < 1.0)).astype(float)


@dataclass
class GroundTruth:
    """Exact components of a scenario and its treatment-effect surface."""
    scenario: Scenario

    def f(self, X: np.ndarray) -> np.ndarray:
        return f_true(X)

    def g(self, W: np.ndarray) -> np.ndarray:
        return g_true(W)

    def h(self, j: int, x_j: np.ndarray, W: np.ndarray) -> np.ndarray:
        """Additive interaction component j (additive scenarios only)."""
        if not self.scenario.is_additive:
            raise ValueError("interactions of a non-additive scenario do not split by covariate")
        X = np.zeros((np.size(x_j), NUM_COVARIATES))
        X[:, j] = x_j
        return modifier_terms(self.scenario.tag, X)[:, j] * g_true(W)

    def interaction(self, X: np.ndarray, W: np.ndarray) -> np.ndarray:
        return modifier(self.scenario.tag, X) * g_true(W)

    def mean(self, X: np.ndarray, W: np.ndarray) -> np.ndarray:
        return f_true(X) + g_true(W) + self.interaction(X, W)

    def tau(self, X: np.ndarray, W: np.ndarray, w0: np.ndarray) -> np.ndarray:
        """tau*(x, w) = mu*(x, w) - mu*(x, w0) at paired rows."""
        X, W = np.atleast_2d(X), np.atleast_2d(W)
        base = g_true(W) - g_true(np.atleast_2d(w0))[0]
        return base * (1.0 + modifier(self.scenario.tag, X))

    def effect(self, w0: np.ndarray):
        """The surface tau*(., .; w0) in the form the estimand engine consumes."""
        g0 = float(g_true(np.atleast_2d(w0))[0])
        tag = self.scenario.tag
        if not self.scenario.is_additive:
            return CallableEffect(lambda X, W: self.tau(X, W, w0))

        def base(W):
            return g_true(W) - g0

        def x_factor(j):
            def fn(x):
                X = np.zeros((x.size, NUM_COVARIATES))
                X[:, j] = x
                return modifier_terms(tag, X)[:, j]
            return fn

        return AdditiveEffect(base, [x_factor(j) for j in range(NUM_COVARIATES)],
                              [base] * NUM_COVARIATES)


def generate(scenario: Scenario) -> Tuple[Dataset, GroundTruth]:
    """
    Draw a dataset from a scenario.

    Returns:
        Tuple of (raw dataset, ground truth)
    """
    problems = scenario.validate()
    if problems:
        raise ValueError("; ".join(problems))
    rng = np.random.default_rng(scenario.seed)
    n = scenario.n
    X = rng.standard_normal((n, NUM_COVARIATES))
    chol = np.linalg.cholesky(exposure_covariance())
    W = exposure_mean(X) + rng.standard_normal((n, NUM_EXPOSURES)) @ chol.T
    truth = GroundTruth(scenario)
    y = truth.mean(X, W) + rng.standard_normal(n)
    ds = Dataset(y, X, W,
                 [f"x{j + 1}" for j in range(NUM_COVARIATES)],
                 [f"w{j + 1}" for j in range(NUM_EXPOSURES)])
    return ds, truth


def sample_exposures(num: int, rng: np.random.Generator) -> np.ndarray:
    """Exposures from their marginal distribution (covariates integrated out)."""
    X = rng.standard_normal((num, NUM_COVARIATES))
    chol = np.linalg.cholesky(exposure_covariance())
    return exposure_mean(X) + rng.standard_normal((num, NUM_EXPOSURES)) @ chol.T


def _normal_expectation(fn: Callable[[float], float]) -> float:
    value, _ = integrate.quad(lambda x: fn(x) * norm.pdf(x), -np.inf, np.inf, limit=200)
    return value


def modifier_moments(tag: str) -> Dict[str, Any]:
    """
    Mean and variance of S(X), and Var of E(S | X_-j) for each j, under X ~ N(0, I).

    Closed forms: E cos(pi X) = exp(-pi^2/2), E cos X = exp(-1/2),
    E cos^2 X = (1 + exp(-2))/2, P(X < 1) = Phi(1); E arctan(4X) = 0 by symmetry.
    """
    p = NUM_COVARIATES
    if tag in ADDITIVE_STRENGTH:
        c = ADDITIVE_STRENGTH[tag]
        var_atan = _normal_expectation(lambda x: np.arctan(4.0 * x) ** 2)
        mean_cos = math.exp(-math.pi ** 2 / 2.0)
        var_cos = (1.0 + math.exp(-2.0 * math.pi ** 2)) / 2.0 - mean_cos ** 2
        term_var = np.zeros(p)
        term_var[0] = c ** 2 * var_atan
        term_var[1] = c ** 2 * var_cos
        total = float(term_var.sum())
        conditional = total - term_var
        mean = c * mean_cos
    elif tag == "violation1":
        a = (1.0 + math.exp(-2.0)) / 2.0
        b = math.exp(-1.0)
        s2 = VIOLATION1_SCALE ** 2
        total = s2 * (a * a - b * b)
        conditional = np.full(p, total)
        conditional[0] = conditional[1] = s2 * b * (a - b)
        mean = VIOLATION1_SCALE * b
    else:
        prob = norm.cdf(1.0)
        s2 = VIOLATION2_SCALE ** 2
        total = s2 * (prob ** 2 - prob ** 4)
        conditional = np.full(p, total)
        conditional[0] = conditional[1] = s2 * prob ** 2 * prob * (1.0 - prob)
        mean = VIOLATION2_SCALE * prob ** 2
    return {"mean": float(mean), "var": float(total), "conditional_var": np.asarray(conditional)}


def true_quantities(scenario: Scenario, contrast: Optional[ExposureContrast] = None,
                    points: Optional[np.ndarray] = None, num_mc: int = 10 ** 6,
                    seed: int = 12345) -> Dict[str, Any]:
    """
    Oracle values of the estimands.

    With covariates independent of each other and of the exposure draw used
    for the outer expectation, phi = E_W[G(W)^2] Var S(X) and
    phi_j = E_W[G(W)^2] Var_{X_-j} E_{X_j}[S(X)]; E_W[G^2] is a Monte Carlo
    average over `num_mc` exposure draws, the rest is exact.

    `phi_centered` replaces E_W[G^2] by Var_W(G), i.e. the value phi takes
    when w0 is a level with g*(w0) = E g*(W). Strong-scenario phi is about
    1.42 and `phi_centered` about 1.16.

    Args:
        scenario: Scenario
        contrast: Exposure contrast (default -0.5 vs 0.5 in every exposure)
        points: Covariate points for CATE values
        num_mc: Monte Carlo size for E_W[G(W)^2]
        seed: Monte Carlo seed

    Returns:
        Dictionary with phi, phi_centered, phi_j, psi, ate and (if points given) cate
    """
    contrast = contrast or default_contrast()
    truth = GroundTruth(scenario)
    moments = modifier_moments(scenario.tag)
    g0 = float(g_true(contrast.w0[None, :])[0])
    g1 = float(g_true(contrast.w1[None, :])[0])

    W = sample_exposures(num_mc, np.random.default_rng(seed))
    shifted = g_true(W) - g0
    second_moment = float(np.mean(shifted ** 2))
    phi = second_moment * moments["var"]
    phi_j = second_moment * moments["conditional_var"]
    if moments["var"] > 0:
        psi = 1.0 - moments["conditional_var"] / moments["var"]
    else:
        psi = np.full(NUM_COVARIATES, np.nan)

    result: Dict[str, Any] = {
        "scenario": scenario.tag,
        "w0": contrast.w0.tolist(),
        "w1": contrast.w1.tolist(),
        "phi": phi,
        "phi_centered": float(np.var(shifted)) * moments["var"],
        "phi_j": phi_j.tolist(),
        "psi": psi.tolist(),
        "ate": (g1 - g0) * (1.0 + moments["mean"]),
        "g_second_moment": second_moment,
    }
    if points is not None:
        P = np.atleast_2d(points)
        result["cate"] = truth.tau(P, np.repeat(contrast.w1[None, :], P.shape[0], axis=0),
                                   contrast.w0).tolist()
    return result


@dataclass
class StudySettings:
    """Everything a replicate needs besides its index."""
    scenario: Scenario
    fit: FitConfig
    contrast: ExposureContrast = field(default_factory=default_contrast)
    alpha: float = 0.05
    num_points: int = 100
    method: str = "mean"
    blocks: Optional[int] = None
    mode: str = "block"
    small_size: int = 100
    compare_blocks: int = 10

    def validate(self) -> List[str]:
        problems = list(self.scenario.validate()) + self.fit.validate()
        if not 0 < self.alpha < 1:
            problems.append("alpha must be in (0, 1)")
        if self.num_points < 1:
            problems.append("num_points must be >= 1")
        if self.mode not in MODES:
            problems.append(f"mode must be one of {', '.join(MODES)}")
        return problems


def run_replicate(settings: StudySettings, replicate: int) -> Dict[str, Any]:
    """
    Generate, fit and evaluate one replicate.

    The replicate seed is the master seed plus the replicate index; it seeds
    the data, the chains and the CATE test points.
    """
    seed = settings.scenario.seed + replicate
    scenario = replace(settings.scenario, seed=seed)
    ds, truth = generate(scenario)
    normalized, info = normalize(ds)
    config = replace(settings.fit, seed=seed)
    samples = merge_chains(fit(normalized, config, info))

    points = np.random.default_rng([seed, 1]).standard_normal((settings.num_points, NUM_COVARIATES))
    oracle = true_quantities(scenario, settings.contrast, points)
    cates = cate_draws(samples, points, settings.contrast)
    lower = np.quantile(cates, 0.025, axis=0)
    upper = np.quantile(cates, 0.975, axis=0)
    estimate = cates.mean(axis=0)
    truth_cate = np.asarray(oracle["cate"])

    ate = summarize(ate_draws(samples, settings.contrast))
    importance = vim(samples, settings.contrast.w0, settings.method, settings.blocks, seed=seed)
    record: Dict[str, Any] = {
        "replicate": replicate,
        "seed": seed,
        "cate_estimate": estimate.tolist(),
        "cate_lower": lower.tolist(),
        "cate_upper": upper.tolist(),
        "cate_truth": truth_cate.tolist(),
        "cate_rmse": float(np.sqrt(np.mean((estimate - truth_cate) ** 2))),
        "cate_coverage": float(np.mean((lower <= truth_cate) & (truth_cate <= upper))),
        "ate": ate,
        "ate_truth": oracle["ate"],
        "ate_covered": bool(ate["lower"] <= oracle["ate"] <= ate["upper"]),
        "phi_mean": float(importance.phi.mean()),
        "psi_mean": _defined_mean(importance),
        "num_undefined": importance.num_undefined,
    }
    try:
        record["rejections"] = rejection_matrix(importance, settings.alpha).astype(int).tolist()
    except SepBartError as exc:
        logger.warning("replicate %d: difference tests skipped: %s", replicate, exc)
        record["rejections"] = None

    if settings.mode == "compare":
        record["blocking"] = _blocking_comparison(samples, settings, seed, oracle["psi"])
    logger.info("replicate %d done: CATE RMSE %.3f, coverage %.2f",
                replicate, record["cate_rmse"], record["cate_coverage"])
    return record


def _defined_mean(result) -> List[float]:
    defined = result.defined
    if not defined.any():
        return [float("nan")] * len(result.labels)
    return result.psi[defined].mean(axis=0).tolist()


def _blocking_comparison(samples, settings: StudySettings, seed: int,
                         true_psi: Sequence[float]) -> Dict[str, Any]:
    """psi by the full matrix, by blocks and by one small random subset, on the same draws."""
    w0 = samples.normalization.transform_exposures(settings.contrast.w0)[0]
    effects = [d.effect(w0) for d in samples.draws]
    n = samples.X.shape[0]
    subset = np.sort(np.random.default_rng([seed, 2]).choice(n, size=min(settings.small_size, n),
                                                             replace=False))
    variants = {
        "full": (samples.X, samples.W, 1),
        "block": (samples.X, samples.W, settings.compare_blocks),
        "small": (samples.X[subset], samples.W[subset], 1),
    }
    out = {}
    for name, (X, W, K) in variants.items():
        result = vim_effects(effects, X, W, settings.method, K, seed=seed, support=(0.0, 1.0),
                             labels=samples.covariate_names)
        psi = np.asarray(_defined_mean(result))
        out[name] = {"psi_mean": psi.tolist(),
                     "rmse": float(np.sqrt(np.nanmean((psi - np.asarray(true_psi)) ** 2)))}
    for name in ("full", "small"):
        out[name]["relative_rmse"] = (out[name]["rmse"] / out["block"]["rmse"]
                                      if out["block"]["rmse"] > 0 else float("nan"))
    return out


def _replicate_job(job: Tuple[StudySettings, int]) -> Dict[str, Any]:
    settings, replicate = job
    try:
        return run_replicate(settings, replicate)
    except (SepBartError, np.linalg.LinAlgError, FloatingPointError) as exc:
        logger.warning("replicate %d failed: %s", replicate, exc)
        return {"replicate": replicate, "failed": True, "error": type(exc).__name__,
                "message": str(exc)}


def replicate_study(settings: StudySettings, replicates: int = 20, workers: int = 1) -> Dict[str, Any]:
    """
    Repeat generate / fit / evaluate and aggregate.

    Args:
        settings: Scenario, fit configuration, contrast and evaluation options
        replicates: Number of replicates R
        workers: Worker processes

    Returns:
        Study report: per-replicate records plus CATE RMSE and coverage,
        psi means against the truth, rejection rates and the failure count
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    logger.info("study: scenario %s, n=%d, %d replicates", settings.scenario.tag,
                settings.scenario.n, replicates)
    records = parallel_map(_replicate_job, [(settings, r) for r in range(replicates)], workers)
    return summarize_study(settings, records)


def summarize_study(settings: StudySettings, records: List[Dict[str, Any]]) -> Dict[str, Any]:
    ok = [r for r in records if not r.get("failed")]
    failures = [r for r in records if r.get("failed")]
    oracle = true_quantities(settings.scenario, settings.contrast)
    report: Dict[str, Any] = {
        "scenario": asdict(settings.scenario),
        "replicates": len(records),
        "num_failures": len(failures),
        "failures": failures,
        "true_phi": oracle["phi"],
        "true_psi": oracle["psi"],
        "true_ate": oracle["ate"],
        "records": records,
    }
    if not ok:
        return report
    psi_means = np.asarray([r["psi_mean"] for r in ok])
    report.update({
        "cate_rmse": float(np.mean([r["cate_rmse"] for r in ok])),
        "cate_coverage": float(np.mean([r["cate_coverage"] for r in ok])),
        "ate_coverage": float(np.mean([r["ate_covered"] for r in ok])),
        "ate_mean": float(np.mean([r["ate"]["mean"] for r in ok])),
        "phi_mean": float(np.mean([r["phi_mean"] for r in ok])),
        "psi_mean": np.nanmean(psi_means, axis=0).tolist(),
    })
    tested = [np.asarray(r["rejections"]) for r in ok if r.get("rejections") is not None]
    if tested:
        report["rejection_rate"] = np.mean(tested, axis=0).tolist()
    if settings.mode == "compare":
        report["blocking"] = {
            name: {"rmse": float(np.mean([r["blocking"][name]["rmse"] for r in ok]))}
            for name in ("full", "block", "small")
        }
    return report


def read_external_predictions(path: str) -> pd.DataFrame:
    """Load another method's CATE predictions for `external_comparison`."""
    try:
        return pd.read_csv(path)
    except FileNotFoundError as exc:
        raise DatasetError(f"file not found: {path}", {"path": str(path)}) from exc
    except (pd.errors.EmptyDataError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DatasetError(f"cannot read external predictions from {path}: {exc}", {"path": str(path)}) from exc


def external_comparison(report: Dict[str, Any], predictions: pd.DataFrame) -> Dict[str, Any]:
    """
    RMSE and coverage of CATE predictions made by another method.

    Args:
        report: Study report from `replicate_study`
        predictions: Columns replicate, point, estimate and optionally lower, upper

    Returns:
        Dictionary with the comparator's mean RMSE and, with intervals, coverage
    """
    missing = [c for c in ("replicate", "point", "estimate") if c not in predictions.columns]
    if missing:
        raise DatasetError(f"external predictions lack column(s): {', '.join(missing)}", {"missing": missing})
    truths = {r["replicate"]: np.asarray(r["cate_truth"]) for r in report["records"]
              if not r.get("failed")}
    rmses, covered = [], []
    for replicate, rows in predictions.groupby("replicate"):
        if replicate not in truths:
            continue
        truth = truths[replicate][rows["point"].to_numpy(dtype=int)]
        rmses.append(float(np.sqrt(np.mean((rows["estimate"].to_numpy(dtype=float) - truth) ** 2))))
        if {"lower", "upper"} <= set(rows.columns):
            inside = ((rows["lower"].to_numpy(dtype=float) <= truth)
                      & (truth <= rows["upper"].to_numpy(dtype=float)))
            covered.append(float(inside.mean()))
    result: Dict[str, Any] = {"replicates": len(rmses),
                              "cate_rmse": float(np.mean(rmses)) if rmses else float("nan")}
    if covered:
        result["cate_coverage"] = float(np.mean(covered))
    return result


def study_tables(report: Dict[str, Any], labels: Sequence[str]) -> Dict[str, pd.DataFrame]:
    """Plot-ready tables: per-replicate CATE metrics, psi means and rejection rates."""
    ok = [r for r in report["records"] if not r.get("failed")]
    tables = {
        "cate": pd.DataFrame([{"replicate": r["replicate"], "rmse": r["cate_rmse"],
                               "coverage": r["cate_coverage"]} for r in ok]),
        "psi": pd.DataFrame([{"replicate": r["replicate"], "label": label, "psi_mean": value}
                             for r in ok for label, value in zip(labels, r["psi_mean"])]),
    }
    if "rejection_rate" in report:
        tables["rejections"] = pd.DataFrame(report["rejection_rate"], index=list(labels),
                                            columns=list(labels))
    return tables
