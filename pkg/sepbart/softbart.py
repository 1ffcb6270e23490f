"""
Soft-tree ensembles (SoftBART) and their Bayesian backfitting sweep.

Each leaf parameter has prior N(0, sigma_mu^2 / M) so that the ensemble has
prior variance sigma_mu^2. Structure moves are judged on the marginal
likelihood with the leaves integrated out; for a soft tree the design row
of observation i is its leaf-weight vector. Leaves are then drawn jointly
from their Gaussian conditional.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.linalg import cholesky, cho_solve, solve_triangular

from .errors import SamplerError
from .trees import (
    CHANGE,
    GROW,
    PRUNE,
    SoftRouting,
    Tree,
    TreePrior,
    leaf_weights,
    propose_move,
)

logger = logging.getLogger(__name__)


@dataclass
class SoftBartConfig:
    """Prior and proposal settings for one soft-tree ensemble."""
    num_trees: int = 50
    tau_prior_rate: float = 10.0
    sigma_mu_scale: float = 1.0
    dirichlet_a: float = 1.0
    dirichlet_xi: float = 1.0
    max_depth: int = 10
    depth_gamma: float = 0.95
    depth_beta: float = 2.0
    bandwidth_init: float = 0.1
    bandwidth_step: float = 0.1
    sigma_mu_step: float = 0.1

    def validate(self, prefix: str = "") -> List[str]:
        """Return every problem with the settings (empty when valid)."""
        problems = []
        if self.num_trees < 1:
            problems.append(f"{prefix}num_trees must be >= 1")
        for name in ("tau_prior_rate", "sigma_mu_scale", "dirichlet_a", "bandwidth_init",
                     "bandwidth_step", "sigma_mu_step"):
            if not getattr(self, name) > 0:
                problems.append(f"{prefix}{name} must be > 0")
        if self.dirichlet_xi < 0:
            problems.append(f"{prefix}dirichlet_xi must be >= 0")
        if self.max_depth < 1:
            problems.append(f"{prefix}max_depth must be >= 1")
        if not 0 < self.depth_gamma < 1:
            problems.append(f"{prefix}depth_gamma must be in (0, 1)")
        if self.depth_beta < 0:
            problems.append(f"{prefix}depth_beta must be >= 0")
        return problems

    @property
    def tree_prior(self) -> TreePrior:
        return TreePrior(self.depth_gamma, self.depth_beta, self.max_depth)


def default_sigma_mu(num_trees: int) -> float:
    return 3.5 / (2.0 * math.sqrt(num_trees))


def log_evidence(design: np.ndarray, residual: np.ndarray, sigma2: float,
                 leaf_var: float) -> float:
    """
    Log marginal likelihood of `residual` with the leaves integrated out,
    up to terms that do not depend on the design.

    The model is residual = design @ mu + noise, mu ~ N(0, leaf_var I),
    noise ~ N(0, sigma2 I).
    """
    num_leaves = design.shape[1]
    precision = design.T @ design / sigma2 + np.eye(num_leaves) / leaf_var
    b = design.T @ residual / sigma2
    upper = cholesky(precision, lower=False)
    log_det = 2.0 * np.sum(np.log(np.diag(upper)))
    quad = b @ cho_solve((upper, False), b)
    return -0.5 * log_det - 0.5 * num_leaves * math.log(leaf_var) + 0.5 * quad


def draw_leaves(design: np.ndarray, residual: np.ndarray, sigma2: float, leaf_var: float,
                rng: np.random.Generator) -> np.ndarray:
    """Joint draw of the leaf values from their Gaussian conditional."""
    num_leaves = design.shape[1]
    precision = design.T @ design / sigma2 + np.eye(num_leaves) / leaf_var
    upper = cholesky(precision, lower=False)
    mean = cho_solve((upper, False), design.T @ residual / sigma2)
    return mean + solve_triangular(upper, rng.standard_normal(num_leaves), lower=False)


def backfit_tree(tree: Tree, partial: np.ndarray, design_fn: Callable[[Tree], np.ndarray],
                 sigma2: float, leaf_var: float, split_probs: np.ndarray, prior: TreePrior,
                 rng: np.random.Generator) -> Tuple[Tree, np.ndarray, str, bool]:
    """
    One Metropolis-Hastings structure step followed by a joint leaf draw.

    Args:
        tree: Current tree
        partial: Residual with every other tree's fit removed
        design_fn: Maps a tree to its (n, L) design matrix
        sigma2: Noise variance
        leaf_var: Prior variance of each leaf
        split_probs: Split-variable probabilities
        prior: Depth prior
        rng: Random generator

    Returns:
        Tuple of (tree after the step, its fit, move tried, whether it was accepted)
    """
    proposal = propose_move(tree, split_probs, rng, prior)
    current_design = design_fn(tree)
    proposed_design = design_fn(proposal.tree)
    log_alpha = (log_evidence(proposed_design, partial, sigma2, leaf_var)
                 - log_evidence(current_design, partial, sigma2, leaf_var)
                 + proposal.log_prior_ratio + proposal.log_proposal_ratio)
    accepted = math.log(rng.uniform()) < log_alpha
    if accepted:
        tree, design = proposal.tree, proposed_design
    else:
        design = current_design
    values = draw_leaves(design, partial, sigma2, leaf_var, rng)
    tree.set_leaf_values(values)
    return tree, design @ values, proposal.move, accepted


@dataclass
class Forest:
    """
    Sum of M soft trees over an r-dimensional input in [0, 1]^r.

    Every tree of the forest shares one bandwidth, one split-probability
    vector and one leaf scale sigma_mu.
    """
    num_inputs: int
    config: SoftBartConfig = field(default_factory=SoftBartConfig)
    trees: List[Tree] = field(default_factory=list)
    bandwidth: float = 0.0
    split_probs: Optional[np.ndarray] = None
    sigma_mu: float = 0.0
    sigma_mu_cap: Optional[float] = None

    def __post_init__(self):
        if not self.trees:
            self.trees = [Tree.stump() for _ in range(self.config.num_trees)]
        if self.bandwidth <= 0:
            self.bandwidth = self.config.bandwidth_init
        if self.split_probs is None:
            self.split_probs = np.full(self.num_inputs, 1.0 / self.num_inputs)
        if self.sigma_mu <= 0:
            self.sigma_mu = default_sigma_mu(self.num_trees)
        self._fits: Optional[np.ndarray] = None
        self.move_stats: Dict[str, List[int]] = {m: [0, 0] for m in (GROW, PRUNE, CHANGE)}

    @property
    def num_trees(self) -> int:
        return len(self.trees)

    @property
    def routing(self) -> SoftRouting:
        return SoftRouting(self.bandwidth)

    @property
    def leaf_var(self) -> float:
        return self.sigma_mu ** 2 / self.num_trees

    def tree_predictions(self, V: np.ndarray, bandwidth: Optional[float] = None) -> np.ndarray:
        """Per-tree predictions, shape (n, M)."""
        routing = SoftRouting(bandwidth or self.bandwidth)
        V = np.atleast_2d(V)
        return np.column_stack([leaf_weights(t, V, routing) @ t.leaf_values for t in self.trees])

    def predict(self, V: np.ndarray) -> np.ndarray:
        return self.tree_predictions(V).sum(axis=1)

    def _multiplied(self, values: np.ndarray, multipliers: Optional[np.ndarray]) -> np.ndarray:
        return values if multipliers is None else values * multipliers

    def current_fit(self, V: np.ndarray, multipliers: Optional[np.ndarray] = None) -> np.ndarray:
        """Fit at the training inputs, cached between sweeps."""
        if self._fits is None or self._fits.shape[0] != V.shape[0]:
            self._fits = self._multiplied(self.tree_predictions(V), multipliers)
        return self._fits.sum(axis=1)

    def sweep(self, residual: np.ndarray, V: np.ndarray, sigma2: float,
              rng: np.random.Generator, multipliers: Optional[np.ndarray] = None) -> "Forest":
        """
        Backfit every tree once, then update bandwidth, split probabilities and sigma_mu.

        Args:
            residual: Target for this forest (outcome minus all other components)
            V: Training inputs, shape (n, r)
            sigma2: Noise variance
            rng: Random generator
            multipliers: Optional (n, M) per-observation scale of each tree's design

        Returns:
            The updated forest (self)

        Raises:
            SamplerError: if the residual is not finite
        """
        if not np.all(np.isfinite(residual)):
            raise SamplerError("non-finite residual passed to forest sweep")
        prior = self.config.tree_prior
        routing = self.routing
        self.current_fit(V, multipliers)
        fits = self._fits
        total = fits.sum(axis=1)
        leaf_var = self.leaf_var

        for m in range(self.num_trees):
            partial = residual - (total - fits[:, m])
            scale = None if multipliers is None else multipliers[:, m][:, None]

            def design_fn(tree: Tree) -> np.ndarray:
                weights = leaf_weights(tree, V, routing)
                return weights if scale is None else weights * scale

            tree, fit, move, accepted = backfit_tree(
                self.trees[m], partial, design_fn, sigma2, leaf_var,
                self.split_probs, prior, rng)
            self.trees[m] = tree
            self.move_stats[move][0] += 1
            self.move_stats[move][1] += int(accepted)
            total += fit - fits[:, m]
            fits[:, m] = fit

        self.update_bandwidth(residual, V, sigma2, rng, multipliers)
        self.update_split_probs(rng)
        self.update_sigma_mu(rng)
        return self

    def update_bandwidth(self, residual: np.ndarray, V: np.ndarray, sigma2: float,
                         rng: np.random.Generator, multipliers: Optional[np.ndarray] = None) -> bool:
        """Random-walk MH on log(bandwidth) against its Exponential prior."""
        rate = self.config.tau_prior_rate
        current = self.bandwidth
        proposed = current * math.exp(self.config.bandwidth_step * rng.standard_normal())
        new_fits = self._multiplied(self.tree_predictions(V, proposed), multipliers)
        old_sse = np.sum((residual - self._fits.sum(axis=1)) ** 2)
        new_sse = np.sum((residual - new_fits.sum(axis=1)) ** 2)
        log_alpha = ((old_sse - new_sse) / (2.0 * sigma2)
                     - rate * (proposed - current)
                     + math.log(proposed) - math.log(current))
        if math.log(rng.uniform()) < log_alpha:
            self.bandwidth = proposed
            self._fits = new_fits
            return True
        return False

    def update_split_probs(self, rng: np.random.Generator) -> None:
        """Dirichlet conditional given the split-variable counts."""
        r = self.num_inputs
        counts = sum(t.split_counts(r) for t in self.trees)
        alpha = self.config.dirichlet_a / r ** self.config.dirichlet_xi + counts
        s = np.maximum(rng.dirichlet(alpha), 0.0)
        self.split_probs = s / s.sum()

    def _sigma_mu_log_post(self, sigma_mu: float, leaves: np.ndarray) -> float:
        leaf_var = sigma_mu ** 2 / self.num_trees
        scale = self.config.sigma_mu_scale
        log_lik = -0.5 * leaves.size * math.log(leaf_var) - np.sum(leaves ** 2) / (2.0 * leaf_var)
        log_prior = -math.log1p((sigma_mu / scale) ** 2)
        return log_lik + log_prior + math.log(sigma_mu)

    def update_sigma_mu(self, rng: np.random.Generator) -> bool:
        """Random-walk MH on log(sigma_mu) against a Half-Cauchy prior; respects the cap."""
        proposed = self.sigma_mu * math.exp(self.config.sigma_mu_step * rng.standard_normal())
        u = rng.uniform()
        if self.sigma_mu_cap is not None and proposed > self.sigma_mu_cap:
            return False
        leaves = np.concatenate([t.leaf_values for t in self.trees])
        log_alpha = (self._sigma_mu_log_post(proposed, leaves)
                     - self._sigma_mu_log_post(self.sigma_mu, leaves))
        if math.log(u) < log_alpha:
            self.sigma_mu = proposed
            return True
        return False

    def acceptance_rates(self) -> Dict[str, float]:
        return {m: (acc / tried if tried else 0.0) for m, (tried, acc) in self.move_stats.items()}

    def snapshot(self) -> "Forest":
        """Independent copy without the training-fit cache."""
        return Forest(
            num_inputs=self.num_inputs,
            config=self.config,
            trees=[t.copy() for t in self.trees],
            bandwidth=self.bandwidth,
            split_probs=self.split_probs.copy(),
            sigma_mu=self.sigma_mu,
            sigma_mu_cap=self.sigma_mu_cap,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "num_inputs": self.num_inputs,
            "trees": [t.to_dict() for t in self.trees],
            "bandwidth": self.bandwidth,
            "split_probs": self.split_probs.tolist(),
            "sigma_mu": self.sigma_mu,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], config: SoftBartConfig,
                  sigma_mu_cap: Optional[float] = None) -> "Forest":
        return cls(
            num_inputs=int(data["num_inputs"]),
            config=config,
            trees=[Tree.from_dict(t) for t in data["trees"]],
            bandwidth=float(data["bandwidth"]),
            split_probs=np.asarray(data["split_probs"], dtype=float),
            sigma_mu=float(data["sigma_mu"]),
            sigma_mu_cap=sigma_mu_cap,
        )


def predict_forest(forest: Forest, V: np.ndarray) -> np.ndarray:
    """Sum of the per-tree soft predictions."""
    return forest.predict(V)
