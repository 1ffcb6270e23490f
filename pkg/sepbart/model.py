"""
The separable outcome model and its backfitting MCMC.

E(Y | X, W) = c + f(X) + g(W) + sum_j h_j(X_j, W)

f is a soft-tree ensemble over the covariates, g one over the exposures,
and each h_j a targeted-smoothing ensemble smooth in X_j. The sampler moves
the unrestricted components; every retained draw is identified by shifting
the components so that f(x_bar) = g(w_bar) = 0 and h_j vanishes when
either argument sits at its anchor. The shift never changes E(Y | X, W).
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import Dataset, NormalizationInfo
from .errors import DrawFileError, SamplerError
from .softbart import Forest, SoftBartConfig
from .tsbart import InteractionForest, TsBartConfig
from .utils import atomic_write_text, dataclass_from_mapping, parallel_map, require_valid, to_jsonable

logger = logging.getLogger(__name__)

DRAW_FORMAT = "sepbart-draws"
DRAW_FORMAT_VERSION = 1


@dataclass
class FitConfig:
    """MCMC length and every prior setting of the three kinds of ensembles."""
    iterations: int = 3000
    burn_in: int = 1500
    thin: int = 3
    chains: int = 1
    seed: int = 0
    trees_f: int = 50
    trees_g: int = 50
    trees_h: int = 20
    tau_prior_rate: float = 10.0
    sigma_mu_scale: float = 1.0
    dirichlet_a: float = 1.0
    dirichlet_xi: float = 1.0
    max_depth: int = 10
    rho: float = 1.0
    rho_update: bool = False
    sigma_mu_cap_policy: str = "paper"
    sigma_prior_shape: float = 1.0
    sigma_prior_rate: float = 1.0
    log_every: int = 500

    def forest_config(self, num_trees: int) -> SoftBartConfig:
        return SoftBartConfig(
            num_trees=num_trees,
            tau_prior_rate=self.tau_prior_rate,
            sigma_mu_scale=self.sigma_mu_scale,
            dirichlet_a=self.dirichlet_a,
            dirichlet_xi=self.dirichlet_xi,
            max_depth=self.max_depth,
        )

    def interaction_config(self) -> TsBartConfig:
        return TsBartConfig(
            num_trees=self.trees_h,
            tau_prior_rate=self.tau_prior_rate,
            sigma_mu_scale=self.sigma_mu_scale,
            dirichlet_a=self.dirichlet_a,
            dirichlet_xi=self.dirichlet_xi,
            max_depth=self.max_depth,
            rho=self.rho,
            rho_update=self.rho_update,
            sigma_mu_cap_policy=self.sigma_mu_cap_policy,
        )

    def validate(self) -> List[str]:
        problems = []
        if self.iterations < 1:
            problems.append("iterations must be >= 1")
        if not 0 <= self.burn_in < self.iterations:
            problems.append("burn_in must be >= 0 and < iterations")
        if self.thin < 1:
            problems.append("thin must be >= 1")
        if self.chains < 1:
            problems.append("chains must be >= 1")
        if self.log_every < 1:
            problems.append("log_every must be >= 1")
        if not (self.sigma_prior_shape > 0 and self.sigma_prior_rate > 0):
            problems.append("sigma_prior_shape and sigma_prior_rate must be > 0")
        problems.extend(self.forest_config(self.trees_f).validate("trees_f/"))
        problems.extend(self.forest_config(self.trees_g).validate("trees_g/"))
        problems.extend(self.interaction_config().validate("trees_h/"))
        return problems

    @property
    def retained_per_chain(self) -> int:
        return len(range(self.burn_in, self.iterations, self.thin))

    @classmethod
    def from_mapping(cls, mapping: Dict[str, Any]) -> "FitConfig":
        config, problems = dataclass_from_mapping(cls, mapping)
        require_valid(problems + config.validate())
        return config


@dataclass
class ModelState:
    """Unrestricted sampler state."""
    intercept: float
    forest_f: Forest
    forest_g: Forest
    interactions: List[InteractionForest]
    sigma2: float

    def snapshot(self) -> "ModelState":
        return ModelState(self.intercept, self.forest_f.snapshot(), self.forest_g.snapshot(),
                          [h.snapshot() for h in self.interactions], self.sigma2)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "intercept": self.intercept,
            "sigma2": self.sigma2,
            "forest_f": self.forest_f.to_dict(),
            "forest_g": self.forest_g.to_dict(),
            "interactions": [h.to_dict() for h in self.interactions],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], config: FitConfig) -> "ModelState":
        return cls(
            intercept=float(data["intercept"]),
            forest_f=Forest.from_dict(data["forest_f"], config.forest_config(config.trees_f)),
            forest_g=Forest.from_dict(data["forest_g"], config.forest_config(config.trees_g)),
            interactions=[InteractionForest.from_dict(h, config.interaction_config())
                          for h in data["interactions"]],
            sigma2=float(data["sigma2"]),
        )

    def raw_mean(self, X: np.ndarray, W: np.ndarray) -> np.ndarray:
        """c0 + f0(x) + g0(w) + sum_j h_j0(x_j, w) on the standardized scale, paired rows."""
        X, W = np.atleast_2d(X), np.atleast_2d(W)
        total = self.intercept + self.forest_f.predict(X) + self.forest_g.predict(W)
        for j, h in enumerate(self.interactions):
            total = total + h.predict(X[:, j], W)
        return total


class IdentifiedComponents:
    """
    Evaluators for the shifted components (c, f, g, h_1..h_p).

    All values are on the standardized outcome scale.
    """

    def __init__(self, state: ModelState, x_anchor: np.ndarray, w_anchor: np.ndarray):
        self.state = state
        self.x_anchor = np.asarray(x_anchor, dtype=float)
        self.w_anchor = np.asarray(w_anchor, dtype=float)
        w_bar = self.w_anchor[None, :]
        self._f_at_anchor = float(state.forest_f.predict(self.x_anchor[None, :])[0])
        self._g_at_anchor = float(state.forest_g.predict(w_bar)[0])
        # per-tree values at w_bar and basis values at x_bar_j, per interaction
        self._trees_at_w_bar = [h.tree_predictions(w_bar)[0] for h in state.interactions]
        self._basis_at_x_bar = [h.basis.evaluate(self.x_anchor[j])[0]
                                for j, h in enumerate(state.interactions)]
        self._h_at_anchors = [float(b @ t) for b, t in zip(self._basis_at_x_bar, self._trees_at_w_bar)]
        self.intercept = (state.intercept + self._f_at_anchor + self._g_at_anchor
                          + sum(self._h_at_anchors))

    @property
    def num_covariates(self) -> int:
        return len(self.state.interactions)

    def f(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        value = self.state.forest_f.predict(X) - self._f_at_anchor
        for j, h in enumerate(self.state.interactions):
            value = value + h.basis.evaluate(X[:, j]) @ self._trees_at_w_bar[j] - self._h_at_anchors[j]
        return value

    def g(self, W: np.ndarray) -> np.ndarray:
        W = np.atleast_2d(W)
        value = self.state.forest_g.predict(W) - self._g_at_anchor
        for j, h in enumerate(self.state.interactions):
            value = value + h.tree_predictions(W) @ self._basis_at_x_bar[j] - self._h_at_anchors[j]
        return value

    def h(self, j: int, x_j: np.ndarray, W: np.ndarray) -> np.ndarray:
        """Identified h_j at paired rows (x_j[i], W[i])."""
        inter = self.state.interactions[j]
        B = inter.basis.evaluate(x_j)
        T = inter.tree_predictions(np.atleast_2d(W))
        return (np.sum(B * T, axis=1)
                - B @ self._trees_at_w_bar[j]
                - T @ self._basis_at_x_bar[j]
                + self._h_at_anchors[j])

    def mean(self, X: np.ndarray, W: np.ndarray) -> np.ndarray:
        X, W = np.atleast_2d(X), np.atleast_2d(W)
        total = self.intercept + self.f(X) + self.g(W)
        for j in range(self.num_covariates):
            total = total + self.h(j, X[:, j], W)
        return total


@dataclass
class ComponentValues:
    """Identified components evaluated at a fixed set of points."""
    intercept: float
    f: np.ndarray
    g: np.ndarray
    h: np.ndarray  # shape (n, p)

    @property
    def mean(self) -> np.ndarray:
        return self.intercept + self.f + self.g + self.h.sum(axis=1)


def _columns(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return values[:, None] if values.ndim == 1 else values


@dataclass
class AdditiveEffect:
    """
    Treatment-effect surface tau(x, w) = base(w) + sum_j w_factor_j(w) . x_factor_j(x_j).

    This is the form every draw of the model has: the effect of moving the
    exposures from w0 to w depends on the covariates only through the
    interaction ensembles, each of which is a sum of products of a function
    of one covariate and a function of the exposures.
    """
    base_fn: Any
    x_factor_fns: List[Any]
    w_factor_fns: List[Any]

    @property
    def num_covariates(self) -> int:
        return len(self.x_factor_fns)

    def base(self, W: np.ndarray) -> np.ndarray:
        return self.base_fn(np.atleast_2d(W))

    def x_factor(self, j: int, x_j: np.ndarray) -> np.ndarray:
        return _columns(self.x_factor_fns[j](np.atleast_1d(np.asarray(x_j, dtype=float))))

    def w_factor(self, j: int, W: np.ndarray) -> np.ndarray:
        return _columns(self.w_factor_fns[j](np.atleast_2d(W)))

    def paired(self, X: np.ndarray, W: np.ndarray) -> np.ndarray:
        X, W = np.atleast_2d(X), np.atleast_2d(W)
        value = self.base(W)
        for j in range(self.num_covariates):
            value = value + np.sum(self.w_factor(j, W) * self.x_factor(j, X[:, j]), axis=1)
        return value

    def matrix(self, X: np.ndarray, W: np.ndarray) -> np.ndarray:
        """tau(X_l, W_k) with rows k over W and columns l over X."""
        X, W = np.atleast_2d(X), np.atleast_2d(W)
        value = np.repeat(self.base(W)[:, None], X.shape[0], axis=1)
        for j in range(self.num_covariates):
            value = value + self.w_factor(j, W) @ self.x_factor(j, X[:, j]).T
        return value


class PosteriorDraw:
    """One retained MCMC draw plus what is needed to evaluate it."""

    def __init__(self, state: ModelState, x_anchor: np.ndarray, w_anchor: np.ndarray,
                 outcome_scale: float = 1.0, outcome_center: float = 0.0,
                 iteration: int = -1, training: Optional[Tuple[np.ndarray, np.ndarray]] = None):
        self.state = state
        self.x_anchor = x_anchor
        self.w_anchor = w_anchor
        self.outcome_scale = outcome_scale
        self.outcome_center = outcome_center
        self.iteration = iteration
        self._components: Optional[IdentifiedComponents] = None
        self._training = training
        self._training_cache: Optional[ComponentValues] = None

    @property
    def components(self) -> IdentifiedComponents:
        if self._components is None:
            self._components = IdentifiedComponents(self.state, self.x_anchor, self.w_anchor)
        return self._components

    def evaluate_components(self, X: np.ndarray, W: np.ndarray) -> ComponentValues:
        comp = self.components
        X, W = np.atleast_2d(X), np.atleast_2d(W)
        h = np.column_stack([comp.h(j, X[:, j], W) for j in range(comp.num_covariates)])
        return ComponentValues(comp.intercept, comp.f(X), comp.g(W), h)

    @property
    def training(self) -> Tuple[np.ndarray, np.ndarray]:
        if self._training is None:
            raise ValueError("draw was created without training points")
        return self._training

    @property
    def training_cache(self) -> ComponentValues:
        """Identified components at the training points, computed once."""
        if self._training_cache is None:
            self._training_cache = self.evaluate_components(*self.training)
        return self._training_cache

    def predict_mu(self, X: np.ndarray, W: np.ndarray) -> np.ndarray:
        """E(Y | x, w) on the original outcome scale; inputs on the normalized scale."""
        return self.outcome_center + self.outcome_scale * self.components.mean(X, W)

    def predict_mu_unidentified(self, X: np.ndarray, W: np.ndarray) -> np.ndarray:
        return self.outcome_center + self.outcome_scale * self.state.raw_mean(X, W)

    def effect(self, w0: np.ndarray) -> AdditiveEffect:
        """tau_{w0}(x, w) = mu(x, w) - mu(x, w0) on the original outcome scale."""
        state = self.state
        scale = self.outcome_scale
        w0 = np.atleast_2d(np.asarray(w0, dtype=float))
        g_w0 = float(state.forest_g.predict(w0)[0])
        trees_w0 = [h.tree_predictions(w0)[0] for h in state.interactions]

        def base(W):
            return scale * (state.forest_g.predict(W) - g_w0)

        def make_w_factor(h, at_w0):
            return lambda W: scale * (h.tree_predictions(W) - at_w0)

        def make_x_factor(h):
            return lambda x: h.basis.evaluate(x)

        return AdditiveEffect(
            base_fn=base,
            x_factor_fns=[make_x_factor(h) for h in state.interactions],
            w_factor_fns=[make_w_factor(h, t) for h, t in zip(state.interactions, trees_w0)],
        )


@dataclass
class PosteriorSamples:
    """Retained draws of one chain together with run metadata."""
    draws: List[PosteriorDraw]
    config: FitConfig
    chain: int
    seed: int
    X: np.ndarray
    W: np.ndarray
    normalization: Optional[NormalizationInfo] = None
    covariate_names: List[str] = field(default_factory=list)
    exposure_names: List[str] = field(default_factory=list)
    acceptance: Dict[str, Dict[str, float]] = field(default_factory=dict)
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.draws)

    def __iter__(self) -> Iterator[PosteriorDraw]:
        return iter(self.draws)

    @property
    def x_anchor(self) -> np.ndarray:
        return self.X.mean(axis=0)

    @property
    def w_anchor(self) -> np.ndarray:
        return self.W.mean(axis=0)


def initial_state(ds: Dataset, config: FitConfig, rng: np.random.Generator) -> ModelState:
    return ModelState(
        intercept=0.0,
        forest_f=Forest(ds.p, config.forest_config(config.trees_f)),
        forest_g=Forest(ds.q, config.forest_config(config.trees_g)),
        interactions=[InteractionForest.create(ds.q, j, config.interaction_config(), rng)
                      for j in range(ds.p)],
        sigma2=1.0,
    )


def chain_seed(seed: int, chain: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(chain)])


def run_chain(ds: Dataset, config: FitConfig, chain: int = 0,
              normalization: Optional[NormalizationInfo] = None) -> PosteriorSamples:
    """
    Run one chain of the backfitting sampler.

    Per iteration: f, then g, then h_1..h_p are each backfit against the
    residual of everything else; then the intercept and the noise variance
    are drawn from their conditionals.

    Args:
        ds: Normalized dataset (quantile-scaled inputs, standardized outcome)
        config: Fit configuration
        chain: Chain index (selects the random stream)
        normalization: Normalization info, stored for de-standardization

    Returns:
        PosteriorSamples of the chain

    Raises:
        SamplerError: with the iteration index if the state becomes non-finite
    """
    rng = np.random.default_rng(chain_seed(config.seed, chain))
    X, W, y = ds.X, ds.W, ds.y
    n, p = ds.n, ds.p
    x_anchor, w_anchor = X.mean(axis=0), W.mean(axis=0)
    scale = normalization.outcome_scale if normalization else 1.0
    center = normalization.outcome_center if normalization else 0.0

    state = initial_state(ds, config, rng)
    fit_f = np.zeros(n)
    fit_g = np.zeros(n)
    fit_h = np.zeros((n, p))
    draws: List[PosteriorDraw] = []
    retain = set(range(config.burn_in, config.iterations, config.thin))

    for it in range(config.iterations):
        try:
            state.forest_f.sweep(y - state.intercept - fit_g - fit_h.sum(axis=1), X,
                                 state.sigma2, rng)
            fit_f = state.forest_f.current_fit(X)
            state.forest_g.sweep(y - state.intercept - fit_f - fit_h.sum(axis=1), W,
                                 state.sigma2, rng)
            fit_g = state.forest_g.current_fit(W)
            for j, inter in enumerate(state.interactions):
                others = fit_h.sum(axis=1) - fit_h[:, j]
                inter.sweep_interaction(y - state.intercept - fit_f - fit_g - others,
                                        X[:, j], W, state.sigma2, rng)
                fit_h[:, j] = inter.current_fit(W)
        except SamplerError as exc:
            raise SamplerError(f"chain {chain}: {exc}", iteration=it) from exc

        resid = y - fit_f - fit_g - fit_h.sum(axis=1)
        state.intercept = float(rng.normal(resid.mean(), math.sqrt(state.sigma2 / n)))
        ssr = float(np.sum((resid - state.intercept) ** 2))
        shape = config.sigma_prior_shape + 0.5 * n
        rate = config.sigma_prior_rate + 0.5 * ssr
        state.sigma2 = 1.0 / rng.gamma(shape, 1.0 / rate)

        if not (math.isfinite(state.intercept) and math.isfinite(state.sigma2)
                and np.all(np.isfinite(fit_f)) and np.all(np.isfinite(fit_g))
                and np.all(np.isfinite(fit_h))):
            raise SamplerError(f"chain {chain}: non-finite sampler state", iteration=it)

        if it in retain:
            draws.append(PosteriorDraw(state.snapshot(), x_anchor, w_anchor, scale, center,
                                       iteration=it, training=(X, W)))
        if (it + 1) % config.log_every == 0:
            logger.info("chain %d: iteration %d/%d, sigma=%.4f, retained=%d",
                        chain, it + 1, config.iterations, math.sqrt(state.sigma2), len(draws))

    acceptance = {"f": state.forest_f.acceptance_rates(), "g": state.forest_g.acceptance_rates()}
    for j, inter in enumerate(state.interactions):
        acceptance[f"h{j + 1}"] = inter.acceptance_rates()
    logger.debug("chain %d acceptance: %s", chain, acceptance)

    return PosteriorSamples(
        draws=draws, config=config, chain=chain, seed=config.seed, X=X, W=W,
        normalization=normalization,
        covariate_names=list(ds.covariate_names), exposure_names=list(ds.exposure_names),
        acceptance=acceptance,
    )


def _run_chain_job(job: Tuple[Dataset, FitConfig, int, Optional[NormalizationInfo]]) -> PosteriorSamples:
    return run_chain(*job)


def fit(ds: Dataset, config: FitConfig, normalization: Optional[NormalizationInfo] = None,
        workers: int = 1) -> List[PosteriorSamples]:
    """
    Fit the model with `config.chains` independent chains.

    Args:
        ds: Normalized dataset
        config: Fit configuration
        normalization: Info returned by `normalize`, used to report on the raw outcome scale
        workers: Number of worker processes

    Returns:
        One PosteriorSamples per chain, in chain order
    """
    require_valid(config.validate())
    logger.info("fitting %d chain(s): n=%d p=%d q=%d, %d iterations",
                config.chains, ds.n, ds.p, ds.q, config.iterations)
    jobs = [(ds, config, chain, normalization) for chain in range(config.chains)]
    return parallel_map(_run_chain_job, jobs, workers)


def merge_chains(chains: Sequence[PosteriorSamples]) -> PosteriorSamples:
    """Pool the draws of chains fitted to the same data."""
    if not chains:
        raise DrawFileError("no chains to merge")
    first = chains[0]
    for other in chains[1:]:
        if other.X.shape != first.X.shape or not np.array_equal(other.X, first.X):
            raise DrawFileError("chains were fitted to different data", {"chains": len(chains)})
    return PosteriorSamples(
        draws=[d for c in chains for d in c.draws],
        config=first.config, chain=-1 if len(chains) > 1 else first.chain, seed=first.seed,
        X=first.X, W=first.W, normalization=first.normalization,
        covariate_names=first.covariate_names, exposure_names=first.exposure_names,
        acceptance=first.acceptance, provenance=first.provenance,
    )


def recenter(state: ModelState, x_anchor: np.ndarray, w_anchor: np.ndarray) -> IdentifiedComponents:
    """Identified component evaluators of a state for the given anchors."""
    return IdentifiedComponents(state, x_anchor, w_anchor)


def predict_mu(draw: PosteriorDraw, X: np.ndarray, W: np.ndarray) -> np.ndarray:
    return draw.predict_mu(X, W)


def write_draws(path: str, samples: PosteriorSamples) -> None:
    """Write a chain as JSON lines: one header line, then one line per draw."""
    header = {
        "format": DRAW_FORMAT,
        "version": DRAW_FORMAT_VERSION,
        "config": asdict(samples.config),
        "seed": samples.seed,
        "chain": samples.chain,
        "num_draws": len(samples.draws),
        "covariate_names": samples.covariate_names,
        "exposure_names": samples.exposure_names,
        "anchors": {"x": samples.x_anchor.tolist(), "w": samples.w_anchor.tolist()},
        "normalization": samples.normalization.to_dict() if samples.normalization else None,
        "training": {"X": samples.X.tolist(), "W": samples.W.tolist()},
        "acceptance": samples.acceptance,
        "provenance": to_jsonable(samples.provenance),
    }
    lines = [json.dumps(header)]
    for draw in samples.draws:
        record = draw.state.to_dict()
        record["iteration"] = draw.iteration
        lines.append(json.dumps(record))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_draws(path: str) -> PosteriorSamples:
    """
    Read a chain written by `write_draws`.

    Raises:
        DrawFileError: on an unknown format, version, or a truncated file
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = [line for line in f if line.strip()]
    except OSError as exc:
        raise DrawFileError(f"cannot read draw file {path}: {exc}", {"path": str(path)}) from exc
    if not lines:
        raise DrawFileError(f"empty draw file {path}", {"path": str(path)})
    try:
        header = json.loads(lines[0])
        records = [json.loads(line) for line in lines[1:]]
    except json.JSONDecodeError as exc:
        raise DrawFileError(f"malformed draw file {path}: {exc}", {"path": str(path)}) from exc
    if header.get("format") != DRAW_FORMAT or header.get("version") != DRAW_FORMAT_VERSION:
        raise DrawFileError(
            f"unsupported draw file format {header.get('format')!r} version {header.get('version')!r}",
            {"path": str(path)},
        )
    if len(records) != header["num_draws"]:
        raise DrawFileError(
            f"draw file {path} is truncated: {len(records)} of {header['num_draws']} draws",
            {"path": str(path)},
        )

    config = FitConfig(**header["config"])
    normalization = (NormalizationInfo.from_dict(header["normalization"])
                     if header["normalization"] else None)
    X = np.asarray(header["training"]["X"], dtype=float)
    W = np.asarray(header["training"]["W"], dtype=float)
    x_anchor = np.asarray(header["anchors"]["x"], dtype=float)
    w_anchor = np.asarray(header["anchors"]["w"], dtype=float)
    scale = normalization.outcome_scale if normalization else 1.0
    center = normalization.outcome_center if normalization else 0.0
    draws = [PosteriorDraw(ModelState.from_dict(r, config), x_anchor, w_anchor, scale, center,
                           iteration=int(r["iteration"]), training=(X, W))
             for r in records]
    return PosteriorSamples(
        draws=draws, config=config, chain=int(header["chain"]), seed=int(header["seed"]),
        X=X, W=W, normalization=normalization,
        covariate_names=list(header["covariate_names"]),
        exposure_names=list(header["exposure_names"]),
        acceptance=header.get("acceptance", {}),
        provenance=header.get("provenance", {}),
    )
