import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treesb.errors import (
    CycleDetected,
    Disconnected,
    NonPositiveLength,
    NonPositiveWeight,
    RootNotObserved,
    TooFewObserved,
    UnobservedLeaf,
    WeightsNotNormalised,
)
from treesb.tree import star_tree, traversal_from, tree_from_config, validate_tree

from .helpers import TWO_HUB_TREE, random_tree_specs


def steps(trav):
    return [(s.parent, s.child) for s in trav.ordered_edges]


def test_minimal_bridge_tree_is_valid():
    tree = validate_tree({"vertices": 2, "edges": [[0, 1, 1.0]], "observed": [0, 1], "sigma": 1.0})
    assert tree.n_vertices == 2
    assert tree.observed == (0, 1)
    assert tree.unobserved == ()


def test_triangle_is_rejected_as_cycle():
    with pytest.raises(CycleDetected):
        validate_tree(
            {"vertices": 3, "edges": [[0, 1, 1], [1, 2, 1], [2, 0, 1]], "observed": [0, 1, 2], "sigma": 1}
        )


def test_star_with_unobserved_centre_is_valid():
    tree = validate_tree(
        {"vertices": 4, "edges": [[0, 1, 1], [0, 2, 1], [0, 3, 1]], "observed": [1, 2, 3], "sigma": 1}
    )
    assert tree.unobserved == (0,)
    assert tree.leaves == (1, 2, 3)


@pytest.mark.parametrize(
    "spec, error",
    [
        ({"vertices": 4, "edges": [[0, 1, 1], [2, 3, 1]], "observed": [0, 1, 2, 3]}, Disconnected),
        ({"vertices": 2, "edges": [[0, 1, 0.0]], "observed": [0, 1]}, NonPositiveLength),
        ({"vertices": 2, "edges": [[0, 1, -2.0]], "observed": [0, 1]}, NonPositiveLength),
        ({"vertices": 3, "edges": [[0, 1, 1], [1, 2, 1]], "observed": [0, 1]}, UnobservedLeaf),
        ({"vertices": 2, "edges": [[0, 1, 1]], "observed": [0]}, TooFewObserved),
    ],
)
def test_invalid_trees(spec, error):
    with pytest.raises(error):
        validate_tree({**spec, "sigma": 1.0})


def test_sigma_from_epsilon():
    tree = validate_tree({"vertices": 2, "edges": [[0, 1, 1]], "observed": [0, 1], "epsilon": 0.1})
    assert tree.sigma == pytest.approx(math.sqrt(0.05))


def test_bridge_traversal():
    tree = validate_tree({"vertices": 2, "edges": [[0, 1, 1.0]], "observed": [0, 1], "sigma": 1.0})
    assert steps(traversal_from(tree, 0)) == [(0, 1)]


def test_star_traversal_from_leaf():
    tree = star_tree([1 / 3] * 3, 0.1)
    assert steps(traversal_from(tree, 1)) == [(1, 0), (0, 2), (0, 3)]


def test_two_hub_traversal_from_first_leaf():
    tree = validate_tree(TWO_HUB_TREE)
    assert tree.leaves == (0, 2, 4, 5, 6)
    trav = traversal_from(tree, 0)
    assert steps(trav) == [(0, 1), (1, 2), (1, 3), (3, 4), (3, 5), (3, 6)]


def test_traversal_root_must_be_observed():
    with pytest.raises(RootNotObserved):
        traversal_from(star_tree([0.5, 0.5], 1.0), 0)


def test_star_tree_lengths_and_sigma():
    tree = star_tree([1 / 3] * 3, 0.1)
    assert [e.length for e in tree.edges] == pytest.approx([3.0, 3.0, 3.0])
    assert tree.sigma == pytest.approx(math.sqrt(0.05))
    assert tree.observed == (1, 2, 3)
    assert [e.length for e in star_tree([0.5, 0.25, 0.25], 7.0).edges] == pytest.approx([2.0, 4.0, 4.0])


def test_star_tree_weight_errors():
    with pytest.raises(WeightsNotNormalised):
        star_tree([0.6, 0.5], 1.0)
    with pytest.raises(NonPositiveWeight):
        star_tree([1.5, -0.5], 1.0)


def test_star_shorthand_in_config():
    assert tree_from_config({"weights": [0.5, 0.5], "epsilon": 0.2}) == star_tree([0.5, 0.5], 0.2)


@settings(max_examples=60, deadline=None)
@given(random_tree_specs())
def test_traversal_covers_each_edge_once_in_topological_order(spec):
    tree = validate_tree(spec)
    for root in tree.observed:
        trav = traversal_from(tree, root)
        assert sorted(s.edge for s in trav.ordered_edges) == list(range(len(tree.edges)))
        seen = {root}
        for s in trav.ordered_edges:
            assert s.parent in seen
            assert s.child not in seen
            seen.add(s.child)
        assert traversal_from(tree, root) == trav


@settings(max_examples=40, deadline=None)
@given(random_tree_specs())
def test_validation_is_idempotent(spec):
    tree = validate_tree(spec)
    assert validate_tree(tree) == tree
    assert validate_tree(tree.to_dict()) == tree


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.05, 1.0), min_size=2, max_size=6), st.floats(1e-3, 5.0))
def test_star_lengths_are_reciprocal_weights(raw, eps):
    w = np.array(raw) / np.sum(raw)
    w[-1] = 1.0 - w[:-1].sum()
    tree = star_tree(w, eps)
    assert [e.length for e in tree.edges] == pytest.approx(1.0 / w, rel=1e-12)
    assert tree.epsilon == pytest.approx(eps, rel=1e-12)
