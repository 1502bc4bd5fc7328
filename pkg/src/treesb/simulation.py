"""Simulation of the learned Markov process along the tree."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import NonFiniteState, PolicyMismatch
from .tree import DirectedTraversal, Tree, traversal_from

Drift = Callable[[np.ndarray, np.ndarray], np.ndarray]
# nets keyed by directed vertex pair (from, to)
EdgeNets = Mapping[tuple[int, int], Drift]

EQUAL_SPLIT = "equal_split"
ROTATION = "rotation"


@dataclass
class CouplingSamples:
    """Joint samples, one row per draw.

    ``values[:, k]`` holds the samples at vertex ``vertices[k]``.  ``start`` is
    the vertex each row was simulated from (-1 when rows were not simulated).
    """

    values: np.ndarray
    vertices: tuple[int, ...]
    start: np.ndarray
    iteration: int = 0

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def at(self, vertex: int) -> np.ndarray:
        return self.values[:, self.vertices.index(vertex)]

    def select(self, vertices: Sequence[int]) -> np.ndarray:
        return self.values[:, [self.vertices.index(v) for v in vertices]]

    def rows_from(self, start: int) -> "CouplingSamples":
        mask = self.start == start
        return CouplingSamples(self.values[mask], self.vertices, self.start[mask], self.iteration)

    def export_csv(self, directory: str | Path, manifest: Mapping | None = None) -> None:
        """One CSV per vertex plus ``manifest.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for k, v in enumerate(self.vertices):
            np.savetxt(directory / f"vertex_{v}.csv", self.values[:, k], delimiter=",", fmt="%.17g")
        np.savetxt(directory / "start.csv", self.start, fmt="%d")
        info = {
            "n": len(self),
            "d": self.dim,
            "vertices": list(self.vertices),
            "iteration": self.iteration,
        }
        info.update(manifest or {})
        (directory / "manifest.json").write_text(json.dumps(info, indent=2, sort_keys=True))

    @classmethod
    def load_csv(cls, directory: str | Path) -> "CouplingSamples":
        directory = Path(directory)
        info = json.loads((directory / "manifest.json").read_text())
        cols = [
            np.loadtxt(directory / f"vertex_{v}.csv", delimiter=",", ndmin=2) for v in info["vertices"]
        ]
        start = np.loadtxt(directory / "start.csv", dtype=int, ndmin=1)
        return cls(np.stack(cols, axis=1), tuple(info["vertices"]), start, info["iteration"])


def euler_maruyama_edge(
    drift: Drift,
    x0: np.ndarray,
    T: float,
    sigma: float,
    steps: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Integrate dX = drift(X, t/T) dt + sigma dB over [0, T]; return X_T.

    The drift receives time normalised to [0, 1].
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(x0, dtype=float)
    h = T / steps
    noise = sigma * np.sqrt(h)
    for k in range(steps):
        t = np.full(x.shape[0], k / steps)
        x = x + h * drift(x, t)
        if sigma > 0:
            x = x + noise * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(f"trajectory diverged at step {k + 1}/{steps}")
    return x


def simulate_tree(
    tree: Tree,
    traversal: DirectedTraversal,
    nets: EdgeNets,
    x_root: np.ndarray,
    steps_per_edge: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Values at every vertex, shape (n, |V|, d), simulated outward from the root."""
    x_root = np.asarray(x_root, dtype=float)
    values = np.full((x_root.shape[0], tree.n_vertices, x_root.shape[1]), np.nan)
    values[:, traversal.root] = x_root
    for step in traversal.ordered_edges:
        drift = nets[(step.parent, step.child)]
        values[:, step.child] = euler_maruyama_edge(
            drift, values[:, step.parent], step.length, tree.sigma, steps_per_edge, rng
        )
    return values


def start_vertices(tree: Tree, n: int, policy: str, iteration: int = 0) -> np.ndarray:
    """Start vertex of each of ``n`` rows under a start policy."""
    obs = tree.observed
    if policy == EQUAL_SPLIT:
        if n % len(obs):
            raise PolicyMismatch(f"n={n} is not divisible by |S|={len(obs)}")
        return np.repeat(np.array(obs), n // len(obs))
    if policy == ROTATION:
        return np.full(n, obs[iteration % len(obs)])
    raise PolicyMismatch(f"unknown start policy {policy!r}")


def generate_coupling(
    tree: Tree,
    nets: EdgeNets,
    samplers: Mapping[int, Callable[[int], np.ndarray]],
    n: int,
    policy: str,
    rng: np.random.Generator,
    iteration: int = 0,
    steps_per_edge: int = 50,
) -> CouplingSamples:
    """Simulate ``n`` joint samples, starting each row at an observed vertex.

    ``samplers[v](k)`` returns ``k`` draws from the marginal at ``v``.
    """
    starts = start_vertices(tree, n, policy, iteration)
    dim = None
    blocks, block_starts = [], []
    for root in tree.observed:
        k = int(np.count_nonzero(starts == root))
        if k == 0:
            continue
        x_root = np.asarray(samplers[root](k), dtype=float)
        dim = x_root.shape[1]
        blocks.append(simulate_tree(tree, traversal_from(tree, root), nets, x_root, steps_per_edge, rng))
        block_starts.append(np.full(k, root))
    if not blocks:
        d = 0 if dim is None else dim
        return CouplingSamples(np.zeros((0, tree.n_vertices, d)), tuple(tree.vertices), np.zeros(0, int), iteration)
    return CouplingSamples(
        np.concatenate(blocks), tuple(tree.vertices), np.concatenate(block_starts), iteration
    )


def conditional_mean_map(
    tree: Tree,
    nets: EdgeNets,
    start: int,
    target: int,
    x: np.ndarray,
    k: int,
    steps_per_edge: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Estimate E[X_target | X_start = x] by averaging ``k`` simulations per point."""
    x = np.asarray(x, dtype=float)
    rep = np.repeat(x, k, axis=0)
    route = path_traversal(tree, start, target)
    values = simulate_tree(tree, route, nets, rep, steps_per_edge, rng)
    return values[:, target].reshape(x.shape[0], k, -1).mean(axis=1)


def path_traversal(tree: Tree, start: int, target: int) -> DirectedTraversal:
    """The part of the traversal from ``start`` that leads to ``target``."""
    full = traversal_from(tree, start)
    parent_step = {step.child: step for step in full.ordered_edges}
    path = []
    v = target
    while v != start:
        step = parent_step[v]
        path.append(step)
        v = step.parent
    return DirectedTraversal(start, tuple(reversed(path)))
