"""Shared fixtures and hypothesis strategies for the test suites."""

from __future__ import annotations

from hypothesis import strategies as st

# Two internal vertices (1 and 3) joined by an edge; 1 carries leaves 0 and 2,
# 3 carries leaves 4, 5 and 6.
TWO_HUB_TREE = {
    "vertices": 7,
    "edges": [[1, 0, 1.0], [1, 2, 1.0], [1, 3, 1.0], [3, 4, 1.0], [3, 5, 1.0], [3, 6, 1.0]],
    "observed": [0, 2, 4, 5, 6],
    "epsilon": 0.1,
}


@st.composite
def random_tree_specs(draw, max_vertices: int = 7):
    """Random trees with every leaf observed and some internal vertices observed too."""
    n = draw(st.integers(2, max_vertices))
    labels = draw(st.permutations(range(n)))
    edges = []
    for i in range(1, n):
        parent = draw(st.integers(0, i - 1))
        length = draw(st.floats(0.1, 5.0))
        edges.append([labels[parent], labels[i], length])
    degree = [0] * n
    for u, v, _ in edges:
        degree[u] += 1
        degree[v] += 1
    observed = {v for v in range(n) if degree[v] == 1}
    for v in range(n):
        if degree[v] > 1 and draw(st.booleans()):
            observed.add(v)
    sigma = draw(st.floats(0.1, 3.0))
    return {"vertices": n, "edges": edges, "observed": sorted(observed), "sigma": sigma}
