"""Metric trees with observed vertices, traversal orders and barycentre stars."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

from .errors import (
    CycleDetected,
    Disconnected,
    NonPositiveLength,
    NonPositiveWeight,
    RootNotObserved,
    TooFewObserved,
    TreeValidationError,
    UnobservedLeaf,
    WeightsNotNormalised,
)


@dataclass(frozen=True)
class Edge:
    u: int
    v: int
    length: float


@dataclass(frozen=True)
class DirectedEdge:
    """One step of a traversal: simulate from ``parent`` to ``child``.

    ``forward`` is True when the step follows the stored edge orientation u -> v.
    """

    parent: int
    child: int
    edge: int
    forward: bool
    length: float


@dataclass(frozen=True)
class DirectedTraversal:
    root: int
    ordered_edges: tuple[DirectedEdge, ...]


@dataclass(frozen=True)
class Tree:
    n_vertices: int
    edges: tuple[Edge, ...]
    observed: tuple[int, ...]
    sigma: float

    @property
    def vertices(self) -> range:
        return range(self.n_vertices)

    @property
    def unobserved(self) -> tuple[int, ...]:
        obs = set(self.observed)
        return tuple(v for v in self.vertices if v not in obs)

    @property
    def epsilon(self) -> float:
        return 2.0 * self.sigma**2

    def neighbours(self, vertex: int) -> list[tuple[int, int]]:
        """(neighbour, edge index) pairs sorted by neighbour id."""
        out = []
        for k, e in enumerate(self.edges):
            if e.u == vertex:
                out.append((e.v, k))
            elif e.v == vertex:
                out.append((e.u, k))
        return sorted(out)

    def degree(self, vertex: int) -> int:
        return sum((e.u == vertex) + (e.v == vertex) for e in self.edges)

    @property
    def leaves(self) -> tuple[int, ...]:
        return tuple(v for v in self.vertices if self.degree(v) == 1)

    def edge_index(self, a: int, b: int) -> int:
        for k, e in enumerate(self.edges):
            if (e.u, e.v) in ((a, b), (b, a)):
                return k
        raise KeyError(f"no edge between {a} and {b}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "vertices": self.n_vertices,
            "edges": [[e.u, e.v, e.length] for e in self.edges],
            "observed": list(self.observed),
            "sigma": self.sigma,
        }


def _parse_vertices(raw) -> int:
    if isinstance(raw, int):
        n = raw
    else:
        ids = sorted(int(v) for v in raw)
        if ids != list(range(len(ids))):
            raise TreeValidationError("vertex ids must be 0..|V|-1")
        n = len(ids)
    if n < 2:
        raise TreeValidationError("a tree needs at least two vertices")
    return n


def validate_tree(spec: Tree | Mapping[str, Any]) -> Tree:
    """Build a :class:`Tree` from a raw description and check its invariants.

    ``spec`` is either a Tree (re-validated) or a mapping with keys ``vertices``
    (count or id list), ``edges`` ([u, v, length] triples), ``observed`` and
    either ``sigma`` or ``epsilon`` (sigma = sqrt(epsilon / 2)).
    """
    if isinstance(spec, Tree):
        spec = spec.to_dict()
    try:
        n = _parse_vertices(spec["vertices"])
        raw_edges = spec["edges"]
        observed = tuple(sorted({int(v) for v in spec["observed"]}))
    except KeyError as exc:
        raise TreeValidationError(f"tree description missing field {exc}") from None

    if "sigma" in spec:
        sigma = float(spec["sigma"])
    elif "epsilon" in spec:
        sigma = math.sqrt(max(float(spec["epsilon"]), 0.0) / 2.0)
    else:
        raise TreeValidationError("tree description needs 'sigma' or 'epsilon'")
    if not sigma > 0 or not math.isfinite(sigma):
        raise TreeValidationError(f"sigma must be positive, got {sigma}")

    edges = []
    for item in raw_edges:
        if len(item) != 3:
            raise TreeValidationError(f"edge must be [u, v, length], got {item!r}")
        u, v, length = int(item[0]), int(item[1]), float(item[2])
        for x in (u, v):
            if not 0 <= x < n:
                raise TreeValidationError(f"edge endpoint {x} out of range")
        if not length > 0 or not math.isfinite(length):
            raise NonPositiveLength(f"edge ({u}, {v}) has length {length}")
        edges.append(Edge(u, v, length))

    # union-find: a repeated component means a cycle
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for e in edges:
        ru, rv = find(e.u), find(e.v)
        if ru == rv:
            raise CycleDetected(f"edge ({e.u}, {e.v}) closes a cycle")
        parent[ru] = rv
    if len({find(v) for v in range(n)}) > 1:
        raise Disconnected("edges do not connect all vertices")

    for v in observed:
        if not 0 <= v < n:
            raise TreeValidationError(f"observed vertex {v} out of range")
    if len(observed) < 2:
        raise TooFewObserved(f"need at least 2 observed vertices, got {len(observed)}")

    tree = Tree(n, tuple(edges), observed, sigma)
    missing = [v for v in tree.leaves if v not in observed]
    if missing:
        raise UnobservedLeaf(f"leaf vertices {missing} are not observed")
    return tree


def traversal_from(tree: Tree, root: int) -> DirectedTraversal:
    """Depth-first edge order from ``root``; children in ascending id order."""
    if root not in tree.observed:
        raise RootNotObserved(f"root {root} is not an observed vertex")
    order: list[DirectedEdge] = []
    stack = [(root, -1)]
    # iterative pre-order; push children in reverse so the smallest id pops first
    while stack:
        vertex, came_from = stack.pop()
        if came_from >= 0:
            e = tree.edges[came_from]
            parent = e.u if e.v == vertex else e.v
            order.append(DirectedEdge(parent, vertex, came_from, e.u == parent, e.length))
        for nb, k in reversed(tree.neighbours(vertex)):
            if k != came_from:
                stack.append((nb, k))
    return DirectedTraversal(root, tuple(order))


def star_tree(weights: Sequence[float], epsilon: float) -> Tree:
    """Barycentre star: centre 0 unobserved, leaf i at edge length 1 / weights[i-1]."""
    w = [float(x) for x in weights]
    if any(not x > 0 for x in w):
        raise NonPositiveWeight(f"barycentre weights must be positive, got {w}")
    if abs(sum(w) - 1.0) > 1e-9:
        raise WeightsNotNormalised(f"weights sum to {sum(w)}, not 1")
    if not epsilon > 0:
        raise TreeValidationError(f"epsilon must be positive, got {epsilon}")
    return validate_tree(
        {
            "vertices": len(w) + 1,
            "edges": [[0, i + 1, 1.0 / x] for i, x in enumerate(w)],
            "observed": list(range(1, len(w) + 1)),
            "sigma": math.sqrt(epsilon / 2.0),
        }
    )


def tree_from_config(spec: Mapping[str, Any]) -> Tree:
    """Explicit tree description, or the star shorthand ``{weights, epsilon}``."""
    if "weights" in spec and "edges" not in spec:
        if "epsilon" not in spec:
            raise TreeValidationError("star shorthand needs 'epsilon'")
        return star_tree(spec["weights"], float(spec["epsilon"]))
    return validate_tree(spec)
