"""
Causal summaries computed from posterior draws.

The treatment-effect surface of a draw relative to a reference exposure w0 is
tau_{w0}(x, w) = mu(x, w) - mu(x, w0). CATE and ATE contrast two exposure
levels; the heterogeneity measures compare the covariate-variance of the
surface (phi) with the variance left after covariate j (or a group of
covariates) has been averaged out given the others (phi_j):

    phi   = E_W Var_X tau_{w0}(X, W)
    phi_j = E_W Var_{X_-j} E_{X_j | X_-j} tau_{w0}(X, W)
    psi_j = 1 - phi_j / phi

Sample versions use n x n matrices tau(X_l, W_k), optionally split into K
blocks of roughly equal size whose estimates are averaged.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.stats import qmc

from .errors import EstimandError
from .model import AdditiveEffect, PosteriorDraw, PosteriorSamples
from .utils import summarize

logger = logging.getLogger(__name__)

METHODS = ("mean", "kernel", "regression")
UNDEFINED_PHI = 1e-12
PSI_TOLERANCE = 1e-8
HERMITE_NODES = 25
GROUP_QMC_POINTS = 32
BLOCK_TARGET_SIZE = 500
MIN_DEFINED_DRAWS = 50


@dataclass
class ExposureContrast:
    """Two exposure levels on the raw scale."""
    w0: np.ndarray
    w1: np.ndarray

    def __post_init__(self):
        self.w0 = np.atleast_1d(np.asarray(self.w0, dtype=float))
        self.w1 = np.atleast_1d(np.asarray(self.w1, dtype=float))
        if self.w0.shape != self.w1.shape:
            raise EstimandError("contrast levels have different lengths",
                                {"w0": self.w0.size, "w1": self.w1.size})
        if not (np.all(np.isfinite(self.w0)) and np.all(np.isfinite(self.w1))):
            raise EstimandError("contrast levels must be finite")

    @classmethod
    def from_quantiles(cls, W: np.ndarray, q0: float = 0.25, q1: float = 0.75) -> "ExposureContrast":
        """Per-exposure quantiles of the raw exposures, e.g. first vs third quartile."""
        W = np.atleast_2d(np.asarray(W, dtype=float))
        return cls(np.quantile(W, q0, axis=0), np.quantile(W, q1, axis=0))

    def check_range(self, W: np.ndarray) -> List[str]:
        """Names of levels outside the observed exposure range; logged as warnings."""
        W = np.atleast_2d(np.asarray(W, dtype=float))
        lo, hi = W.min(axis=0), W.max(axis=0)
        outside = []
        for label, level in (("w0", self.w0), ("w1", self.w1)):
            if np.any(level < lo) or np.any(level > hi):
                outside.append(label)
                logger.warning("contrast level %s lies outside the observed exposure range", label)
        return outside


@dataclass
class TauMatrix:
    """tau_{w0}(X_l, W_k): rows index exposures k, columns index covariates l."""
    values: np.ndarray
    rows: np.ndarray
    cols: np.ndarray

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        self.rows = np.asarray(self.rows)
        self.cols = np.asarray(self.cols)
        if self.values.shape != (self.rows.size, self.cols.size):
            raise EstimandError("tau matrix does not match its index sets",
                                {"shape": list(self.values.shape),
                                 "rows": int(self.rows.size), "cols": int(self.cols.size)})


@dataclass
class CallableEffect:
    """An arbitrary surface tau(x, w) given as a function of paired rows."""
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]

    def paired(self, X: np.ndarray, W: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(np.atleast_2d(X), np.atleast_2d(W)), dtype=float)

    def matrix(self, X: np.ndarray, W: np.ndarray) -> np.ndarray:
        X, W = np.atleast_2d(X), np.atleast_2d(W)
        m, r = X.shape[0], W.shape[0]
        values = self.paired(np.tile(X, (r, 1)), np.repeat(W, m, axis=0))
        return values.reshape(r, m)


EffectSurface = Union[AdditiveEffect, CallableEffect]


@dataclass
class VimResult:
    """Per-draw heterogeneity and importance values."""
    labels: List[str]
    phi: np.ndarray
    phi_j: np.ndarray
    psi_raw: np.ndarray
    method: str = "mean"
    blocks: int = 1
    reference: Optional[np.ndarray] = None
    num_out_of_range: int = 0

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=float).reshape(-1)
        self.psi_raw = np.atleast_2d(np.asarray(self.psi_raw, dtype=float))
        self.phi_j = np.atleast_2d(np.asarray(self.phi_j, dtype=float))
        if self.psi_raw.shape != (self.phi.size, len(self.labels)):
            raise EstimandError("psi values do not match draws and labels")

    @property
    def num_draws(self) -> int:
        return self.phi.size

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.psi_raw).any(axis=1)

    @property
    def num_undefined(self) -> int:
        return int(np.sum(~self.defined))

    @property
    def psi(self) -> np.ndarray:
        """psi clamped to [0, 1]; NaN rows for draws without heterogeneity."""
        return np.clip(self.psi_raw, 0.0, 1.0)

    def index(self, key: Union[int, str]) -> int:
        if isinstance(key, str):
            if key not in self.labels:
                raise EstimandError(f"unknown importance label '{key}'", {"labels": self.labels})
            return self.labels.index(key)
        if not 0 <= key < len(self.labels):
            raise EstimandError(f"importance index {key} out of range", {"size": len(self.labels)})
        return int(key)

    def summary(self, level: float = 0.95) -> Dict[str, Any]:
        defined = self.defined
        report: Dict[str, Any] = {
            "method": self.method,
            "blocks": self.blocks,
            "num_draws": self.num_draws,
            "num_undefined": self.num_undefined,
            "num_out_of_range": self.num_out_of_range,
            "phi": summarize(self.phi, level),
            "psi": {},
            "psi_raw_mean": {},
        }
        if defined.any():
            psi = self.psi[defined]
            raw = self.psi_raw[defined]
            for j, label in enumerate(self.labels):
                report["psi"][label] = summarize(psi[:, j], level)
                report["psi_raw_mean"][label] = float(raw[:, j].mean())
            report["psi_raw_sum_mean"] = float(raw.sum(axis=1).mean())
        return report

    def to_rows(self) -> List[Dict[str, Any]]:
        """One row per draw and label, for plotting tables."""
        rows = []
        for d in range(self.num_draws):
            for j, label in enumerate(self.labels):
                rows.append({
                    "draw": d,
                    "label": label,
                    "phi": float(self.phi[d]),
                    "phi_j": float(self.phi_j[d, j]),
                    "psi_raw": float(self.psi_raw[d, j]),
                    "psi": float(self.psi[d, j]),
                })
        return rows


def _draw_list(samples: Union[PosteriorSamples, Sequence[PosteriorDraw]]) -> List[PosteriorDraw]:
    draws = list(samples.draws if isinstance(samples, PosteriorSamples) else samples)
    if not draws:
        raise EstimandError("no posterior draws")
    return draws


def normalized_exposures(samples: PosteriorSamples, W: np.ndarray) -> np.ndarray:
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if samples.normalization is None:
        return W
    return samples.normalization.transform_exposures(W)


def normalized_covariates(samples: PosteriorSamples, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if samples.normalization is None:
        return X
    return samples.normalization.transform_covariates(X)


def cate_draws(samples: PosteriorSamples, X: np.ndarray, contrast: ExposureContrast) -> np.ndarray:
    """
    CATE of every draw at raw covariate points.

    Returns:
        Array of shape (num_draws, num_points)
    """
    draws = _draw_list(samples)
    Xn = normalized_covariates(samples, X)
    w0 = normalized_exposures(samples, contrast.w0)
    w1 = normalized_exposures(samples, contrast.w1)
    W0 = np.repeat(w0, Xn.shape[0], axis=0)
    W1 = np.repeat(w1, Xn.shape[0], axis=0)
    return np.vstack([d.predict_mu(Xn, W1) - d.predict_mu(Xn, W0) for d in draws])


def cate(samples: PosteriorSamples, x: np.ndarray, contrast: ExposureContrast,
         level: float = 0.95) -> Dict[str, float]:
    """Posterior summary of tau_{w1,w0}(x) at one raw covariate point."""
    return summarize(cate_draws(samples, x, contrast)[:, 0], level)


def training_cate_draws(samples: PosteriorSamples, contrast: ExposureContrast,
                        rows: Optional[np.ndarray] = None) -> np.ndarray:
    """CATE of every draw at (a subset of) the training covariates, shape (num_draws, n)."""
    draws = _draw_list(samples)
    X = samples.X if rows is None else samples.X[rows]
    w0 = normalized_exposures(samples, contrast.w0)
    w1 = normalized_exposures(samples, contrast.w1)
    W0, W1 = np.repeat(w0, X.shape[0], axis=0), np.repeat(w1, X.shape[0], axis=0)
    return np.vstack([d.predict_mu(X, W1) - d.predict_mu(X, W0) for d in draws])


def ate_draws(samples: PosteriorSamples, contrast: ExposureContrast) -> np.ndarray:
    """Per-draw ATE: the CATE averaged over the training covariates."""
    return training_cate_draws(samples, contrast).mean(axis=1)


def ate(samples: PosteriorSamples, contrast: ExposureContrast, level: float = 0.95) -> Dict[str, float]:
    return summarize(ate_draws(samples, contrast), level)


def tau_matrix(draw: PosteriorDraw, rows: Sequence[int], cols: Sequence[int],
               w0: np.ndarray) -> TauMatrix:
    """
    tau_{w0}(X_l, W_k) at training points, for exposure rows k and covariate columns l.

    Args:
        draw: Posterior draw
        rows: Indices of training exposures
        cols: Indices of training covariates
        w0: Reference exposure on the normalized scale

    Returns:
        TauMatrix of shape (len(rows), len(cols))
    """
    X, W = draw.training
    rows, cols = np.asarray(rows), np.asarray(cols)
    effect = draw.effect(w0)
    return TauMatrix(effect.matrix(X[cols], W[rows]), rows, cols)


def total_heterogeneity(matrix: Union[TauMatrix, np.ndarray]) -> float:
    """Mean over rows of the sample variance across columns."""
    values = matrix.values if isinstance(matrix, TauMatrix) else np.atleast_2d(matrix)
    if values.shape[1] < 2:
        raise EstimandError("total heterogeneity needs at least two covariate columns")
    return float(np.var(values, axis=1, ddof=1).mean())


@dataclass
class SmoothingPlan:
    """
    Conditional-expectation rule for a group of covariate columns.

    The smoothed surface at column l is sum_s weights[l, s] * tau(x_l with
    the group replaced by source s). Sources are shared by all columns
    (shape (S, g)) or specific to each column (shape (m, S, g)).
    """
    group: Tuple[int, ...]
    sources: np.ndarray
    weights: np.ndarray
    uniform: bool = False

    @property
    def shared(self) -> bool:
        return self.sources.ndim == 2

    @property
    def num_sources(self) -> int:
        return self.weights.shape[1]

    def source_points(self, s: int) -> np.ndarray:
        """Group values at source s, shape (m, g)."""
        if self.shared:
            return np.broadcast_to(self.sources[s], (self.weights.shape[0], len(self.group)))
        return self.sources[:, s, :]


def silverman_bandwidth(Z: np.ndarray) -> np.ndarray:
    """Rule-of-thumb bandwidth per dimension for a Gaussian product kernel."""
    m, d = Z.shape
    sd = Z.std(axis=0, ddof=1)
    return sd * (4.0 / ((d + 2.0) * m)) ** (1.0 / (d + 4.0))


def kernel_weights(Z: np.ndarray, bandwidth: Optional[Union[float, np.ndarray]] = None) -> np.ndarray:
    """
    Nadaraya-Watson weight matrix: row l holds K((Z_i - Z_l) / h) normalized over i.

    Raises:
        EstimandError: if a bandwidth is zero or a row of weights vanishes
    """
    h = silverman_bandwidth(Z) if bandwidth is None else np.broadcast_to(
        np.asarray(bandwidth, dtype=float), (Z.shape[1],))
    if np.any(h <= 0):
        raise EstimandError("kernel smoother has a zero bandwidth (constant conditioning column)",
                            {"bandwidth": np.asarray(h).tolist()})
    diff = (Z[:, None, :] - Z[None, :, :]) / h
    weights = np.exp(-0.5 * np.sum(diff ** 2, axis=2))
    totals = weights.sum(axis=1)
    if np.any(totals <= 0) or not np.all(np.isfinite(totals)):
        raise EstimandError("kernel smoother produced all-zero weights")
    return weights / totals[:, None]


def build_plan(X: np.ndarray, group: Sequence[int], method: str = "mean", seed: int = 0,
               support: Optional[Tuple[float, float]] = None,
               bandwidth: Optional[Union[float, np.ndarray]] = None) -> SmoothingPlan:
    """
    Smoothing rule for integrating `group` out of the covariates X.

    Args:
        X: Covariates of the block, shape (m, p)
        group: Columns to integrate out
        method: 'mean' (independence), 'kernel' (Nadaraya-Watson on the
            other columns) or 'regression' (Gaussian linear model of the
            group given the other columns)
        seed: Seed of the quasi-Monte Carlo points used for groups
        support: Bounds that imputed values are clipped to
        bandwidth: Kernel bandwidth override

    Returns:
        SmoothingPlan
    """
    if method not in METHODS:
        raise EstimandError(f"unknown smoothing method '{method}'", {"methods": list(METHODS)})
    X = np.atleast_2d(X)
    m = X.shape[0]
    group = tuple(int(j) for j in group)
    others = [j for j in range(X.shape[1]) if j not in group]

    if method == "mean" or not others:
        return SmoothingPlan(group, X[:, group], np.full((m, m), 1.0 / m), uniform=True)

    if method == "kernel":
        return SmoothingPlan(group, X[:, group], kernel_weights(X[:, others], bandwidth))

    target = X[:, group]
    for pos, j in enumerate(group):
        if np.ptp(target[:, pos]) == 0.0:
            raise EstimandError(f"regression smoother: covariate {j} is constant", {"covariate": j})
    design = np.column_stack([np.ones(m), X[:, others]])
    dof = m - design.shape[1]
    if dof < 1:
        raise EstimandError("regression smoother has no residual degrees of freedom")
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    fitted = design @ coef
    resid = target - fitted
    cov = resid.T @ resid / dof

    if len(group) == 1:
        nodes, node_weights = hermegauss(HERMITE_NODES)
        draws = math.sqrt(cov[0, 0]) * nodes[:, None]
        probs = node_weights / node_weights.sum()
    else:
        sampler = qmc.MultivariateNormalQMC(mean=np.zeros(len(group)), cov=cov, seed=seed)
        draws = sampler.random(GROUP_QMC_POINTS)
        probs = np.full(GROUP_QMC_POINTS, 1.0 / GROUP_QMC_POINTS)
    sources = fitted[:, None, :] + draws[None, :, :]
    if support is not None:
        sources = np.clip(sources, support[0], support[1])
    return SmoothingPlan(group, sources, np.broadcast_to(probs, (m, probs.size)).copy())


def _with_columns(X: np.ndarray, group: Tuple[int, ...], values: np.ndarray) -> np.ndarray:
    out = X.copy()
    out[:, list(group)] = values
    return out


def _smoothed_factor(effect: AdditiveEffect, j: int, pos: int, plan: SmoothingPlan,
                     X: np.ndarray) -> np.ndarray:
    """E_{x_j | rest} of the covariate factor of component j at every column."""
    if plan.uniform:
        factor = effect.x_factor(j, X[:, j])
        return np.broadcast_to(factor.mean(axis=0), factor.shape)
    if plan.shared:
        return plan.weights @ effect.x_factor(j, plan.sources[:, pos])
    m, S = plan.weights.shape
    values = effect.x_factor(j, plan.sources[:, :, pos].reshape(-1))
    return np.einsum("ls,lsd->ld", plan.weights, values.reshape(m, S, -1))


def smooth_out_covariate(effect: EffectSurface, X: np.ndarray, W: np.ndarray,
                         group: Union[int, Sequence[int]], method: str = "mean", seed: int = 0,
                         support: Optional[Tuple[float, float]] = None,
                         bandwidth: Optional[Union[float, np.ndarray]] = None) -> np.ndarray:
    """
    E_{X_s | X_-s} tau(X_l, W_k) for every exposure row k and covariate column l.

    Returns:
        Array of shape (len(W), len(X))
    """
    X, W = np.atleast_2d(X), np.atleast_2d(W)
    group = (group,) if isinstance(group, (int, np.integer)) else tuple(group)
    plan = build_plan(X, group, method, seed, support, bandwidth)
    if isinstance(effect, AdditiveEffect):
        value = np.repeat(effect.base(W)[:, None], X.shape[0], axis=1)
        for j in range(effect.num_covariates):
            factor = (_smoothed_factor(effect, j, group.index(j), plan, X) if j in group
                      else effect.x_factor(j, X[:, j]))
            value = value + effect.w_factor(j, W) @ factor.T
        return value
    smoothed = np.zeros((W.shape[0], X.shape[0]))
    for s in range(plan.num_sources):
        shifted = _with_columns(X, group, plan.source_points(s))
        smoothed += plan.weights[:, s][None, :] * effect.matrix(shifted, W)
    return smoothed


def _quadratic_mean(F: np.ndarray, E: np.ndarray) -> float:
    """mean_k Var_l(F[k] . E[l]) using the sample covariance of the columns of E."""
    C = np.atleast_2d(np.cov(E, rowvar=False, ddof=1))
    return float(np.mean(np.einsum("kd,de,ke->k", F, C, F)))


def _block_heterogeneity(effect: EffectSurface, X: np.ndarray, W: np.ndarray,
                         plans: Sequence[SmoothingPlan]) -> Tuple[float, np.ndarray]:
    """phi and phi_s for every plan on one square block."""
    phis = np.empty(len(plans))
    if isinstance(effect, AdditiveEffect):
        p = effect.num_covariates
        F = np.hstack([effect.w_factor(j, W) for j in range(p)])
        factors = [effect.x_factor(j, X[:, j]) for j in range(p)]
        phi = _quadratic_mean(F, np.hstack(factors))
        for g, plan in enumerate(plans):
            smoothed = list(factors)
            for pos, j in enumerate(plan.group):
                smoothed[j] = _smoothed_factor(effect, j, pos, plan, X)
            phis[g] = _quadratic_mean(F, np.hstack(smoothed))
        return phi, phis

    phi = total_heterogeneity(effect.matrix(X, W))
    for g, plan in enumerate(plans):
        smoothed = np.zeros((W.shape[0], X.shape[0]))
        for s in range(plan.num_sources):
            shifted = _with_columns(X, plan.group, plan.source_points(s))
            smoothed += plan.weights[:, s][None, :] * effect.matrix(shifted, W)
        phis[g] = total_heterogeneity(smoothed)
    return phi, phis


def default_blocks(n: int) -> int:
    return max(1, math.ceil(n / BLOCK_TARGET_SIZE))


def block_partition(n: int, blocks: int, seed: int = 0) -> List[np.ndarray]:
    """Contiguous pieces of a seeded permutation of range(n)."""
    if blocks < 1 or n < 2 * blocks:
        raise EstimandError(f"cannot split {n} observations into {blocks} blocks of at least 2",
                            {"n": n, "blocks": blocks})
    order = np.arange(n) if blocks == 1 else np.random.default_rng(seed).permutation(n)
    return np.array_split(order, blocks)


def vim_effects(effects: Iterable[EffectSurface], X: np.ndarray, W: np.ndarray,
                method: str = "mean", blocks: Optional[int] = None,
                groups: Optional[Mapping[str, Sequence[int]]] = None, seed: int = 0,
                support: Optional[Tuple[float, float]] = None,
                labels: Optional[Sequence[str]] = None,
                bandwidth: Optional[Union[float, np.ndarray]] = None) -> VimResult:
    """
    Heterogeneity engine over any sequence of effect surfaces.

    Args:
        effects: One effect surface per draw
        X: Covariates, shape (n, p)
        W: Exposures, shape (n, q)
        method: Conditional-expectation smoother
        blocks: Number of blocks K (default ceil(n / 500))
        groups: Named covariate groups; one importance value per group
        seed: Seed of the block permutation and of quasi-Monte Carlo points
        support: Bounds for imputed covariate values
        labels: Covariate names when no groups are given
        bandwidth: Kernel bandwidth override

    Returns:
        VimResult
    """
    X, W = np.atleast_2d(X), np.atleast_2d(W)
    n, p = X.shape
    K = default_blocks(n) if blocks is None else int(blocks)
    partition = block_partition(n, K, seed)
    if groups is None:
        names = list(labels) if labels is not None else [f"x{j + 1}" for j in range(p)]
        groups = {name: (j,) for j, name in enumerate(names)}
    group_list = [tuple(int(j) for j in g) for g in groups.values()]
    for g in group_list:
        if not g or any(not 0 <= j < p for j in g):
            raise EstimandError("covariate group with invalid columns", {"group": list(g)})

    plans = [[build_plan(X[idx], g, method, seed, support, bandwidth) for g in group_list]
             for idx in partition]

    phi, phi_j = [], []
    for effect in effects:
        block_phi = np.empty(K)
        block_phis = np.empty((K, len(group_list)))
        for b, idx in enumerate(partition):
            block_phi[b], block_phis[b] = _block_heterogeneity(effect, X[idx], W[idx], plans[b])
        phi.append(block_phi.mean())
        phi_j.append(block_phis.mean(axis=0))
    if not phi:
        raise EstimandError("no posterior draws")

    phi = np.asarray(phi)
    phi_j = np.vstack(phi_j)
    psi_raw = np.full_like(phi_j, np.nan)
    ok = phi >= UNDEFINED_PHI
    psi_raw[ok] = 1.0 - phi_j[ok] / phi[ok, None]
    if not ok.all():
        logger.warning("%d of %d draws have no heterogeneity (phi < %g); their psi is undefined",
                       int(np.sum(~ok)), phi.size, UNDEFINED_PHI)
    defined = psi_raw[ok]
    out_of_range = int(np.sum(np.any((defined < -PSI_TOLERANCE) | (defined > 1.0 + PSI_TOLERANCE),
                                     axis=1)))
    if out_of_range:
        logger.info("%d draws have raw psi outside [0, 1]; reported values are clamped", out_of_range)
    return VimResult(list(groups), phi, phi_j, psi_raw, method, K, num_out_of_range=out_of_range)


def resolve_groups(groups: Optional[Mapping[str, Sequence[Union[int, str]]]],
                   names: Sequence[str]) -> Optional[Dict[str, Tuple[int, ...]]]:
    """Map group members given as names or indices to column indices."""
    if groups is None:
        return None
    resolved = {}
    for label, members in groups.items():
        columns = []
        for member in members:
            if isinstance(member, str):
                if member not in names:
                    raise EstimandError(f"group '{label}' names unknown covariate '{member}'",
                                        {"group": label, "covariate": member})
                columns.append(list(names).index(member))
            else:
                columns.append(int(member))
        resolved[label] = tuple(columns)
    return resolved


def vim(samples: PosteriorSamples, w0: np.ndarray, method: str = "mean",
        blocks: Optional[int] = None,
        groups: Optional[Mapping[str, Sequence[Union[int, str]]]] = None,
        seed: int = 0, bandwidth: Optional[Union[float, np.ndarray]] = None) -> VimResult:
    """
    Treatment-effect variable importance of every covariate (or group) for reference w0.

    Args:
        samples: Posterior draws
        w0: Reference exposure on the raw scale
        method: 'mean', 'kernel' or 'regression'
        blocks: Number of blocks (default ceil(n / 500))
        groups: Optional named covariate groups (members by name or index)
        seed: Seed of the block assignment
        bandwidth: Kernel bandwidth override

    Returns:
        VimResult labelled by covariate (or group) name
    """
    draws = _draw_list(samples)
    w0n = normalized_exposures(samples, w0)[0]
    effects = (d.effect(w0n) for d in draws)
    result = vim_effects(effects, samples.X, samples.W, method, blocks,
                         resolve_groups(groups, samples.covariate_names), seed,
                         support=(0.0, 1.0), labels=samples.covariate_names, bandwidth=bandwidth)
    result.reference = np.atleast_1d(np.asarray(w0, dtype=float))
    return result


def vim_difference_test(result: VimResult, j: Union[int, str], k: Union[int, str],
                        alpha: float = 0.05) -> Tuple[Tuple[float, float], bool]:
    """
    Equal-tailed interval of psi_j - psi_k and whether it excludes zero.

    Raises:
        EstimandError: with fewer than 50 draws of defined psi
    """
    a, b = result.index(j), result.index(k)
    defined = result.defined
    if defined.sum() < MIN_DEFINED_DRAWS:
        raise EstimandError(
            f"difference test needs at least {MIN_DEFINED_DRAWS} draws with defined psi",
            {"defined": int(defined.sum())},
        )
    psi = result.psi[defined]
    diff = psi[:, a] - psi[:, b]
    lower = float(np.quantile(diff, alpha / 2.0))
    upper = float(np.quantile(diff, 1.0 - alpha / 2.0))
    return (lower, upper), not (lower <= 0.0 <= upper)


def rejection_matrix(result: VimResult, alpha: float = 0.05) -> np.ndarray:
    """Reject flags of every pairwise difference test; diagonal is False."""
    size = len(result.labels)
    rejects = np.zeros((size, size), dtype=bool)
    for a in range(size):
        for b in range(a + 1, size):
            _, reject = vim_difference_test(result, a, b, alpha)
            rejects[a, b] = rejects[b, a] = reject
    return rejects


def hetero_curve(samples: PosteriorSamples, j: int, contrast: ExposureContrast,
                 grid: Sequence[float], level: float = 0.95) -> List[Dict[str, float]]:
    """
    Effect of covariate j on the CATE with every other covariate at its mean.

    For each raw grid value x_j the profile x~ has x_j in position j and the
    anchors elsewhere. `heterogeneity` is CATE(x~) - CATE(x_bar), which the
    identification makes equal to h_j(x_j, w1) - h_j(x_j, w0); `cate` is CATE(x~).

    Returns:
        One row per grid point with summaries of both quantities
    """
    draws = _draw_list(samples)
    grid = np.asarray(grid, dtype=float)
    if samples.normalization is not None:
        u = samples.normalization.covariate_maps[j].forward(grid)
    else:
        u = grid
    w0 = normalized_exposures(samples, contrast.w0)
    w1 = normalized_exposures(samples, contrast.w1)
    profile = np.repeat(samples.x_anchor[None, :], u.size, axis=0)
    profile[:, j] = u
    W0, W1 = np.repeat(w0, u.size, axis=0), np.repeat(w1, u.size, axis=0)

    hetero = np.empty((len(draws), u.size))
    cates = np.empty((len(draws), u.size))
    for d, draw in enumerate(draws):
        inter = draw.state.interactions[j]
        shift = inter.basis.evaluate(u) - inter.basis.evaluate(draw.x_anchor[j])
        delta = inter.tree_predictions(w1)[0] - inter.tree_predictions(w0)[0]
        hetero[d] = draw.outcome_scale * (shift @ delta)
        cates[d] = draw.predict_mu(profile, W1) - draw.predict_mu(profile, W0)

    rows = []
    for i, x in enumerate(grid):
        h = summarize(hetero[:, i], level)
        c = summarize(cates[:, i], level)
        rows.append({
            "x": float(x),
            "heterogeneity_mean": h["mean"], "heterogeneity_lower": h["lower"],
            "heterogeneity_upper": h["upper"],
            "cate_mean": c["mean"], "cate_lower": c["lower"], "cate_upper": c["upper"],
        })
    return rows


def _exposure_swapped_matrix(effect: EffectSurface, X: np.ndarray, W: np.ndarray, e: int) -> np.ndarray:
    """(1/m) sum_i tau(X_l, W_k with w_e := W_ie), rows k and columns l."""
    m = W.shape[0]
    stacked = np.tile(W, (m, 1))
    stacked[:, e] = np.repeat(W[:, e], m)
    if isinstance(effect, AdditiveEffect):
        value = np.repeat(effect.base(stacked).reshape(m, m).mean(axis=0)[:, None], X.shape[0], axis=1)
        for j in range(effect.num_covariates):
            F = effect.w_factor(j, stacked)
            value = value + F.reshape(m, m, -1).mean(axis=0) @ effect.x_factor(j, X[:, j]).T
        return value
    return np.mean([effect.matrix(X, stacked[i * m:(i + 1) * m]) for i in range(m)], axis=0)


def exposure_vim_effects(effects: Iterable[EffectSurface], X: np.ndarray, W: np.ndarray,
                         labels: Optional[Sequence[str]] = None) -> VimResult:
    """
    Exposure-side importance: the transpose of the covariate engine.

    The variance runs over exposures for each covariate profile and the mean
    smoother integrates out one exposure at a time.
    """
    X, W = np.atleast_2d(X), np.atleast_2d(W)
    q = W.shape[1]
    names = list(labels) if labels is not None else [f"w{e + 1}" for e in range(q)]
    phi, phi_e = [], []
    for effect in effects:
        T = effect.matrix(X, W)
        phi.append(float(np.var(T, axis=0, ddof=1).mean()))
        phi_e.append([float(np.var(_exposure_swapped_matrix(effect, X, W, e), axis=0, ddof=1).mean())
                      for e in range(q)])
    if not phi:
        raise EstimandError("no posterior draws")
    phi = np.asarray(phi)
    phi_e = np.asarray(phi_e)
    psi_raw = np.full_like(phi_e, np.nan)
    ok = phi >= UNDEFINED_PHI
    psi_raw[ok] = 1.0 - phi_e[ok] / phi[ok, None]
    return VimResult(names, phi, phi_e, psi_raw, "mean", 1)


def exposure_vim(samples: PosteriorSamples, w0: np.ndarray, num_draws: int = 20,
                 num_points: int = 100, seed: int = 0) -> VimResult:
    """Exposure-side importance on a seeded subsample of draws and observations."""
    draws = _draw_list(samples)
    rng = np.random.default_rng(seed)
    n = samples.X.shape[0]
    points = np.sort(rng.choice(n, size=min(num_points, n), replace=False))
    picked = np.sort(rng.choice(len(draws), size=min(num_draws, len(draws)), replace=False))
    w0n = normalized_exposures(samples, w0)[0]
    effects = (draws[i].effect(w0n) for i in picked)
    result = exposure_vim_effects(effects, samples.X[points], samples.W[points], samples.exposure_names)
    result.reference = np.atleast_1d(np.asarray(w0, dtype=float))
    return result
