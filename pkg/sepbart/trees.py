"""
Decision trees with soft (probabilistic) routing.

A tree routes a point to every leaf with some probability: at an internal
node with split variable j and cut c the point goes right with probability
gate((v_j - c) / bandwidth), where gate is the logistic function. As the
bandwidth goes to zero the tree becomes an ordinary hard decision tree.

Trees are values: structural moves return new trees and never modify the
tree they were proposed from.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
from scipy.special import expit

LEAF = -1

GROW = "grow"
PRUNE = "prune"
CHANGE = "change"

MOVE_PROBS = {GROW: 0.4, PRUNE: 0.4, CHANGE: 0.2}

DEFAULT_MAX_DEPTH = 10


@dataclass(frozen=True)
class SoftRouting:
    """Bandwidth of the logistic gate shared by all splits of an ensemble."""
    bandwidth: float

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")

    @staticmethod
    def gate(t: np.ndarray) -> np.ndarray:
        return expit(t)


@dataclass(frozen=True)
class TreePrior:
    """Depth prior p(split at depth d) = gamma * (1 + d)^(-beta), zero from max_depth on."""
    gamma: float = 0.95
    beta: float = 2.0
    max_depth: int = DEFAULT_MAX_DEPTH

    def split_prob(self, depth: int) -> float:
        if depth >= self.max_depth:
            return 0.0
        return self.gamma * (1.0 + depth) ** (-self.beta)

    def log_grow_ratio(self, depth: int) -> float:
        """Log prior ratio of splitting a leaf at `depth` into two leaves."""
        p = self.split_prob(depth)
        p_child = self.split_prob(depth + 1)
        return math.log(p) + 2.0 * math.log1p(-p_child) - math.log1p(-p)


def check_split_probs(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if s.ndim != 1 or s.size == 0 or np.any(s < 0) or not np.isclose(s.sum(), 1.0):
        raise ValueError("split probabilities must be a non-negative vector summing to 1")
    return s


@dataclass
class Tree:
    """
    Binary tree stored as parallel node lists.

    Node 0 is the root. Children always have larger indices than their
    parent, so a forward pass over the node list visits parents first.
    Leaves have split_var == LEAF; only leaves carry a meaningful `mu`.
    """
    split_var: List[int] = field(default_factory=lambda: [LEAF])
    cut: List[float] = field(default_factory=lambda: [0.0])
    left: List[int] = field(default_factory=lambda: [LEAF])
    right: List[int] = field(default_factory=lambda: [LEAF])
    depth: List[int] = field(default_factory=lambda: [0])
    mu: List[float] = field(default_factory=lambda: [0.0])

    @classmethod
    def stump(cls, value: float = 0.0) -> "Tree":
        return cls(mu=[float(value)])

    def copy(self) -> "Tree":
        return Tree(list(self.split_var), list(self.cut), list(self.left),
                    list(self.right), list(self.depth), list(self.mu))

    @property
    def num_nodes(self) -> int:
        return len(self.split_var)

    def is_leaf(self, node: int) -> bool:
        return self.split_var[node] == LEAF

    @property
    def leaves(self) -> List[int]:
        return [i for i, v in enumerate(self.split_var) if v == LEAF]

    @property
    def internal(self) -> List[int]:
        return [i for i, v in enumerate(self.split_var) if v != LEAF]

    @property
    def prunable(self) -> List[int]:
        """Internal nodes whose two children are both leaves."""
        return [i for i in self.internal
                if self.is_leaf(self.left[i]) and self.is_leaf(self.right[i])]

    def growable(self, max_depth: int) -> List[int]:
        return [i for i in self.leaves if self.depth[i] < max_depth]

    @property
    def max_depth(self) -> int:
        return max(self.depth[i] for i in self.leaves)

    @property
    def leaf_values(self) -> np.ndarray:
        return np.array([self.mu[i] for i in self.leaves])

    def set_leaf_values(self, values: np.ndarray) -> None:
        for node, value in zip(self.leaves, values):
            self.mu[node] = float(value)

    def split_counts(self, num_vars: int) -> np.ndarray:
        counts = np.zeros(num_vars)
        for i in self.internal:
            counts[self.split_var[i]] += 1
        return counts

    def grow(self, node: int, var: int, cut: float) -> "Tree":
        """Return a copy with leaf `node` split on `var` at `cut`."""
        tree = self.copy()
        d = tree.depth[node] + 1
        base = tree.num_nodes
        tree.split_var.extend([LEAF, LEAF])
        tree.cut.extend([0.0, 0.0])
        tree.left.extend([LEAF, LEAF])
        tree.right.extend([LEAF, LEAF])
        tree.depth.extend([d, d])
        tree.mu.extend([0.0, 0.0])
        tree.split_var[node] = int(var)
        tree.cut[node] = float(cut)
        tree.left[node] = base
        tree.right[node] = base + 1
        tree.mu[node] = 0.0
        return tree

    def prune(self, node: int) -> "Tree":
        """Return a copy with the two leaf children of `node` removed."""
        removed = {self.left[node], self.right[node]}
        keep = [i for i in range(self.num_nodes) if i not in removed]
        index = {old: new for new, old in enumerate(keep)}

        def remap(child: int) -> int:
            return LEAF if child == LEAF else index[child]

        tree = Tree(
            split_var=[self.split_var[i] for i in keep],
            cut=[self.cut[i] for i in keep],
            left=[remap(self.left[i]) for i in keep],
            right=[remap(self.right[i]) for i in keep],
            depth=[self.depth[i] for i in keep],
            mu=[self.mu[i] for i in keep],
        )
        k = index[node]
        tree.split_var[k] = LEAF
        tree.cut[k] = 0.0
        tree.left[k] = LEAF
        tree.right[k] = LEAF
        tree.mu[k] = 0.0
        return tree

    def change(self, node: int, var: int, cut: float) -> "Tree":
        tree = self.copy()
        tree.split_var[node] = int(var)
        tree.cut[node] = float(cut)
        return tree

    def to_dict(self) -> Dict[str, Any]:
        return {
            "split_var": list(self.split_var),
            "cut": list(self.cut),
            "left": list(self.left),
            "right": list(self.right),
            "mu": list(self.mu),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Tree":
        split_var = [int(v) for v in data["split_var"]]
        left = [int(v) for v in data["left"]]
        right = [int(v) for v in data["right"]]
        depth = [0] * len(split_var)
        for i, var in enumerate(split_var):
            if var != LEAF:
                depth[left[i]] = depth[i] + 1
                depth[right[i]] = depth[i] + 1
        return cls(split_var, [float(c) for c in data["cut"]], left, right, depth,
                   [float(m) for m in data["mu"]])


def leaf_weights(tree: Tree, V: np.ndarray, routing: SoftRouting) -> np.ndarray:
    """
    Probability of reaching each leaf, for every row of V.

    Args:
        tree: The tree
        V: Points, shape (n, r) or a single point of shape (r,)
        routing: Gate bandwidth

    Returns:
        Array of shape (n, L) with columns in `tree.leaves` order; rows sum to 1
    """
    V = np.atleast_2d(np.asarray(V, dtype=float))
    n = V.shape[0]
    prob: List[Optional[np.ndarray]] = [None] * tree.num_nodes
    prob[0] = np.ones(n)
    for i in range(tree.num_nodes):
        var = tree.split_var[i]
        if var == LEAF:
            continue
        go_right = routing.gate((V[:, var] - tree.cut[i]) / routing.bandwidth)
        prob[tree.right[i]] = prob[i] * go_right
        prob[tree.left[i]] = prob[i] * (1.0 - go_right)
    return np.column_stack([prob[i] for i in tree.leaves])


def predict(tree: Tree, V: np.ndarray, routing: SoftRouting) -> np.ndarray:
    """Soft prediction: leaf weights times leaf values."""
    return leaf_weights(tree, V, routing) @ tree.leaf_values


def hard_leaf_index(tree: Tree, v: np.ndarray) -> int:
    """Leaf reached by ordinary traversal (right when v_j > cut)."""
    node = 0
    while tree.split_var[node] != LEAF:
        node = tree.right[node] if v[tree.split_var[node]] > tree.cut[node] else tree.left[node]
    return node


def hard_predict(tree: Tree, V: np.ndarray) -> np.ndarray:
    V = np.atleast_2d(np.asarray(V, dtype=float))
    return np.array([tree.mu[hard_leaf_index(tree, v)] for v in V])


@dataclass
class Proposal:
    """A proposed structural move and the ratios MH needs to judge it."""
    move: str
    tree: Tree
    log_proposal_ratio: float
    log_prior_ratio: float
    node: int


def move_probs(tree: Tree, max_depth: int) -> Dict[str, float]:
    """Move mixture for `tree` with infeasible moves removed and mass renormalized."""
    feasible = {
        GROW: len(tree.growable(max_depth)) > 0,
        PRUNE: len(tree.internal) > 0,
        CHANGE: len(tree.internal) > 0,
    }
    total = sum(p for m, p in MOVE_PROBS.items() if feasible[m])
    return {m: (p / total if feasible[m] else 0.0) for m, p in MOVE_PROBS.items()}


def propose_move(tree: Tree, split_probs: np.ndarray, rng: np.random.Generator,
                 prior: TreePrior = TreePrior()) -> Proposal:
    """
    Draw a GROW, PRUNE or CHANGE proposal.

    The split-variable probability and the Uniform(0, 1) cut density enter
    the tree prior and the proposal identically, so both ratios are
    returned with those factors cancelled.

    Args:
        tree: Current tree
        split_probs: Probability of each input dimension being split on
        rng: Random generator
        prior: Depth prior

    Returns:
        Proposal with the new tree, log q(old|new)/q(new|old) and the log prior ratio
    """
    probs = move_probs(tree, prior.max_depth)
    moves = list(probs)
    move = moves[rng.choice(len(moves), p=[probs[m] for m in moves])]
    r = len(split_probs)

    if move == GROW:
        candidates = tree.growable(prior.max_depth)
        node = candidates[rng.integers(len(candidates))]
        var = int(rng.choice(r, p=split_probs))
        cut = float(rng.uniform())
        new = tree.grow(node, var, cut)
        reverse = move_probs(new, prior.max_depth)[PRUNE] / len(new.prunable)
        forward = probs[GROW] / len(candidates)
        return Proposal(GROW, new, math.log(reverse) - math.log(forward),
                        prior.log_grow_ratio(tree.depth[node]), node)

    if move == PRUNE:
        candidates = tree.prunable
        node = candidates[rng.integers(len(candidates))]
        new = tree.prune(node)
        reverse = move_probs(new, prior.max_depth)[GROW] / len(new.growable(prior.max_depth))
        forward = probs[PRUNE] / len(candidates)
        return Proposal(PRUNE, new, math.log(reverse) - math.log(forward),
                        -prior.log_grow_ratio(tree.depth[node]), node)

    candidates = tree.internal
    node = candidates[rng.integers(len(candidates))]
    var = int(rng.choice(r, p=split_probs))
    cut = float(rng.uniform())
    return Proposal(CHANGE, tree.change(node, var, cut), 0.0, 0.0, node)
