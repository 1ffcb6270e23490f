"""
Tests for the soft decision trees and their structural moves.
"""

import unittest

import numpy as np

from sepbart.trees import (
    CHANGE,
    GROW,
    PRUNE,
    SoftRouting,
    Tree,
    TreePrior,
    check_split_probs,
    hard_predict,
    leaf_weights,
    move_probs,
    predict,
    propose_move,
)


def depth_two_tree() -> Tree:
    """Root splits x0 at 0.5; its right child splits x1 at 0.3."""
    tree = Tree.stump().grow(0, 0, 0.5)
    tree = tree.grow(tree.right[0], 1, 0.3)
    tree.set_leaf_values(np.array([1.0, 2.0, 3.0]))
    return tree


class TestLeafWeights(unittest.TestCase):
    """Test cases for soft routing."""

    def test_single_leaf(self):
        """A stump sends every point to its only leaf."""
        weights = leaf_weights(Tree.stump(), np.random.default_rng(0).uniform(size=(5, 2)),
                               SoftRouting(0.1))
        np.testing.assert_array_equal(weights, np.ones((5, 1)))

    def test_cut_at_point_splits_evenly(self):
        tree = Tree.stump().grow(0, 0, 0.4)
        weights = leaf_weights(tree, np.array([0.4, 0.9]), SoftRouting(0.05))
        np.testing.assert_allclose(weights, [[0.5, 0.5]], atol=1e-15)

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(1)
        V = rng.uniform(size=(200, 2))
        for bandwidth in (1e-3, 0.1, 10.0):
            weights = leaf_weights(depth_two_tree(), V, SoftRouting(bandwidth))
            self.assertTrue(np.all(weights >= 0) and np.all(weights <= 1))
            np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-12)

    def test_hard_limit(self):
        """With a tiny bandwidth the weights are the one-hot hard routing."""
        tree = depth_two_tree()
        rng = np.random.default_rng(2)
        V = rng.uniform(size=(1000, 2))
        keep = (np.abs(V[:, 0] - 0.5) >= 1e-6) & (np.abs(V[:, 1] - 0.3) >= 1e-6)
        V = V[keep]
        weights = leaf_weights(tree, V, SoftRouting(1e-9))
        hard = np.zeros_like(weights)
        leaves = tree.leaves
        for i, v in enumerate(V):
            node = 0
            while not tree.is_leaf(node):
                node = tree.right[node] if v[tree.split_var[node]] > tree.cut[node] else tree.left[node]
            hard[i, leaves.index(node)] = 1.0
        self.assertLess(np.max(np.abs(weights - hard)), 1e-12)
        np.testing.assert_allclose(predict(tree, V, SoftRouting(1e-9)), hard_predict(tree, V),
                                   atol=1e-12)

    def test_bandwidth_must_be_positive(self):
        with self.assertRaises(ValueError):
            SoftRouting(0.0)


class TestPredict(unittest.TestCase):
    """Test cases for tree prediction."""

    def test_constant_leaves(self):
        tree = depth_two_tree()
        tree.set_leaf_values(np.full(3, 3.0))
        V = np.random.default_rng(3).uniform(size=(50, 2))
        np.testing.assert_allclose(predict(tree, V, SoftRouting(0.2)), 3.0, atol=1e-12)

    def test_linear_in_leaves(self):
        tree = depth_two_tree()
        V = np.random.default_rng(4).uniform(size=(50, 2))
        base = predict(tree, V, SoftRouting(0.2))
        tree.set_leaf_values(2.0 * tree.leaf_values)
        np.testing.assert_allclose(predict(tree, V, SoftRouting(0.2)), 2.0 * base, atol=1e-12)


class TestStructure(unittest.TestCase):
    """Test cases for tree editing and the move proposal."""

    def test_grow_then_prune_restores_tree(self):
        tree = depth_two_tree()
        node = tree.leaves[0]
        grown = tree.grow(node, 1, 0.7)
        self.assertEqual(len(grown.leaves), len(grown.internal) + 1)
        restored = grown.prune(node)
        self.assertEqual(restored.split_var, tree.split_var)
        self.assertEqual(restored.left, tree.left)
        self.assertEqual(restored.right, tree.right)
        self.assertEqual(restored.cut, tree.cut)

    def test_moves_do_not_modify_original(self):
        tree = depth_two_tree()
        before = tree.to_dict()
        tree.grow(tree.leaves[0], 0, 0.2)
        tree.prune(tree.prunable[0])
        tree.change(0, 1, 0.9)
        self.assertEqual(tree.to_dict(), before)

    def test_dict_round_trip_restores_depth(self):
        tree = depth_two_tree()
        copy = Tree.from_dict(tree.to_dict())
        self.assertEqual(copy.depth, tree.depth)
        self.assertEqual(copy.max_depth, 2)

    def test_stump_only_grows(self):
        probs = move_probs(Tree.stump(), max_depth=10)
        self.assertEqual(probs, {GROW: 1.0, PRUNE: 0.0, CHANGE: 0.0})
        rng = np.random.default_rng(5)
        for _ in range(20):
            self.assertEqual(propose_move(Tree.stump(), np.array([0.5, 0.5]), rng).move, GROW)

    def test_grow_disabled_at_max_depth(self):
        tree = Tree.stump().grow(0, 0, 0.5)
        probs = move_probs(tree, max_depth=1)
        self.assertEqual(probs[GROW], 0.0)
        self.assertAlmostEqual(probs[PRUNE] + probs[CHANGE], 1.0)

    def test_move_frequencies(self):
        """A two-leaf tree proposes GROW/PRUNE/CHANGE at 0.4/0.4/0.2."""
        tree = Tree.stump().grow(0, 0, 0.5)
        rng = np.random.default_rng(6)
        counts = {GROW: 0, PRUNE: 0, CHANGE: 0}
        draws = 20000
        for _ in range(draws):
            counts[propose_move(tree, np.array([0.5, 0.5]), rng).move] += 1
        for move, expected in ((GROW, 0.4), (PRUNE, 0.4), (CHANGE, 0.2)):
            se = np.sqrt(expected * (1 - expected) / draws)
            self.assertLess(abs(counts[move] / draws - expected), 4 * se)

    def test_depth_never_exceeds_cap(self):
        rng = np.random.default_rng(7)
        prior = TreePrior(max_depth=3)
        tree = Tree.stump()
        for _ in range(300):
            tree = propose_move(tree, np.array([0.5, 0.5]), rng, prior).tree
            self.assertLessEqual(tree.max_depth, 3)

    def test_grow_prune_ratios_are_reverse(self):
        rng = np.random.default_rng(8)
        tree = Tree.stump()
        prior = TreePrior()
        proposal = propose_move(tree, np.array([1.0]), rng, prior)
        back = prior.log_grow_ratio(0)
        self.assertAlmostEqual(proposal.log_prior_ratio, back)
        # stump -> 2 leaves: forward GROW prob 1 over 1 leaf, reverse PRUNE 0.4 over 1 node
        self.assertAlmostEqual(proposal.log_proposal_ratio, np.log(0.4))

    def test_split_probs_validation(self):
        np.testing.assert_array_equal(check_split_probs([0.25, 0.75]), [0.25, 0.75])
        with self.assertRaises(ValueError):
            check_split_probs([0.5, 0.6])
        with self.assertRaises(ValueError):
            check_split_probs([-0.5, 1.5])


if __name__ == "__main__":
    unittest.main()
