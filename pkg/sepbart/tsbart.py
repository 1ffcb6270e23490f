"""
Targeted-smoothing interaction ensembles.

h(u, w) = sum_m B_m(u) * Tree_m(w) with B_m(u) = sqrt(2) cos(omega_m u + b_m).
The random cosine basis makes h smooth in the single covariate u while the
trees stay flexible in the exposures w. Frequencies are stored as
omega_m = z_m / rho with z_m standard normal, so that a change of the
length-scale rho rescales the same basis.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .softbart import Forest, SoftBartConfig, default_sigma_mu
from .trees import Tree

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
LENGTH_SCALE_GRID = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass
class TsBartConfig(SoftBartConfig):
    """Settings for one interaction ensemble."""
    num_trees: int = 20
    rho: float = 1.0
    rho_update: bool = False
    sigma_mu_cap_policy: str = "paper"

    def validate(self, prefix: str = "") -> List[str]:
        problems = super().validate(prefix)
        if not self.rho > 0:
            problems.append(f"{prefix}rho must be > 0")
        if self.rho_update and self.rho not in LENGTH_SCALE_GRID:
            problems.append(f"{prefix}rho must be one of {LENGTH_SCALE_GRID} when rho_update is on")
        if self.sigma_mu_cap_policy != "paper":
            problems.append(f"{prefix}sigma_mu_cap_policy must be 'paper'")
        return problems


def sigma_mu_cap(num_trees: int) -> float:
    """Hard cap on the leaf scale of an interaction ensemble."""
    return default_sigma_mu(num_trees)


@dataclass
class CosineBasis:
    """Random cosine features, one per tree, fixed for the run."""
    z: np.ndarray
    phase: np.ndarray
    length_scale: float = 1.0

    @classmethod
    def draw(cls, num: int, length_scale: float, rng: np.random.Generator) -> "CosineBasis":
        return cls(rng.standard_normal(num), rng.uniform(0.0, 2.0 * math.pi, num), length_scale)

    @property
    def omega(self) -> np.ndarray:
        return self.z / self.length_scale

    def evaluate(self, u: np.ndarray) -> np.ndarray:
        """Basis matrix of shape (n, M) for points u of shape (n,)."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return SQRT2 * np.cos(np.outer(u, self.omega) + self.phase)

    def to_dict(self) -> Dict[str, Any]:
        return {"z": self.z.tolist(), "phase": self.phase.tolist(),
                "length_scale": self.length_scale}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CosineBasis":
        return cls(np.asarray(data["z"], dtype=float), np.asarray(data["phase"], dtype=float),
                   float(data["length_scale"]))


def basis_eval(basis: CosineBasis, m: int, u: float) -> float:
    """sqrt(2) cos(omega_m u + b_m)."""
    return SQRT2 * math.cos(basis.omega[m] * u + basis.phase[m])


@dataclass
class InteractionForest(Forest):
    """Soft trees over the exposures, each multiplied by its cosine feature of one covariate."""
    basis: Optional[CosineBasis] = None
    covariate: int = 0
    config: TsBartConfig = field(default_factory=TsBartConfig)

    def __post_init__(self):
        super().__post_init__()
        self.sigma_mu_cap = sigma_mu_cap(self.num_trees)
        self.sigma_mu = min(self.sigma_mu, self.sigma_mu_cap)
        if self.basis is None:
            raise ValueError("an interaction forest needs a cosine basis")
        self._multipliers: Optional[np.ndarray] = None

    @classmethod
    def create(cls, num_exposures: int, covariate: int, config: TsBartConfig,
               rng: np.random.Generator) -> "InteractionForest":
        basis = CosineBasis.draw(config.num_trees, config.rho, rng)
        return cls(num_inputs=num_exposures, config=config, basis=basis, covariate=covariate)

    def factors(self, u: np.ndarray, W: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(basis matrix at u, per-tree predictions at W); h = rowwise dot for paired rows."""
        return self.basis.evaluate(u), self.tree_predictions(W)

    def predict(self, u: np.ndarray, W: np.ndarray) -> np.ndarray:
        """Paired evaluation h(u_i, W_i)."""
        B, T = self.factors(u, W)
        return np.sum(B * T, axis=1)

    def sweep_interaction(self, residual: np.ndarray, x_col: np.ndarray, W: np.ndarray,
                          sigma2: float, rng: np.random.Generator) -> "InteractionForest":
        """
        Backfit the ensemble with each tree's design scaled by its basis at x_col.

        Args:
            residual: Outcome minus every other component
            x_col: The covariate this ensemble smooths over, shape (n,)
            W: Training exposures, shape (n, q)
            sigma2: Noise variance
            rng: Random generator

        Returns:
            The updated forest (self)
        """
        if self._multipliers is None or self._multipliers.shape[0] != x_col.shape[0]:
            self._multipliers = self.basis.evaluate(x_col)
        self.sweep(residual, W, sigma2, rng, self._multipliers)
        if self.config.rho_update:
            self.update_length_scale(residual, x_col, W, sigma2, rng)
        return self

    def update_length_scale(self, residual: np.ndarray, x_col: np.ndarray, W: np.ndarray,
                            sigma2: float, rng: np.random.Generator) -> bool:
        """MH step for rho over a fixed log-spaced grid with a uniform prior."""
        grid = list(LENGTH_SCALE_GRID)
        current = grid.index(self.length_scale)
        others = [k for k in range(len(grid)) if k != current]
        proposed = grid[others[rng.integers(len(others))]]
        u = rng.uniform()

        trees = self.tree_predictions(W)
        old_fit = np.sum(self._multipliers * trees, axis=1)
        new_multipliers = CosineBasis(self.basis.z, self.basis.phase, proposed).evaluate(x_col)
        new_fit = np.sum(new_multipliers * trees, axis=1)
        log_alpha = (np.sum((residual - old_fit) ** 2)
                     - np.sum((residual - new_fit) ** 2)) / (2.0 * sigma2)
        if math.log(u) < log_alpha:
            self.basis = CosineBasis(self.basis.z, self.basis.phase, proposed)
            self._multipliers = new_multipliers
            self._fits = new_multipliers * trees
            return True
        return False

    @property
    def length_scale(self) -> float:
        return self.basis.length_scale

    def snapshot(self) -> "InteractionForest":
        return InteractionForest(
            num_inputs=self.num_inputs,
            config=self.config,
            trees=[t.copy() for t in self.trees],
            bandwidth=self.bandwidth,
            split_probs=self.split_probs.copy(),
            sigma_mu=self.sigma_mu,
            basis=CosineBasis(self.basis.z.copy(), self.basis.phase.copy(),
                              self.basis.length_scale),
            covariate=self.covariate,
        )

    def to_dict(self) -> Dict[str, Any]:
        data = super().to_dict()
        data["basis"] = self.basis.to_dict()
        data["covariate"] = self.covariate
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any], config: TsBartConfig) -> "InteractionForest":
        return cls(
            num_inputs=int(data["num_inputs"]),
            config=config,
            trees=[Tree.from_dict(t) for t in data["trees"]],
            bandwidth=float(data["bandwidth"]),
            split_probs=np.asarray(data["split_probs"], dtype=float),
            sigma_mu=float(data["sigma_mu"]),
            basis=CosineBasis.from_dict(data["basis"]),
            covariate=int(data["covariate"]),
        )


def predict_interaction(forest: InteractionForest, x_j: np.ndarray, w: np.ndarray) -> np.ndarray:
    """sum_m B_m(x_j) * Tree_m(w), paired over rows."""
    return forest.predict(np.atleast_1d(x_j), np.atleast_2d(w))


def kernel_covariance(u: float, v: float, sigma_mu: float, length_scale: float) -> float:
    """Squared-exponential limit of the random cosine construction."""
    return sigma_mu ** 2 * math.exp(-((u - v) ** 2) / (2.0 * length_scale ** 2))
