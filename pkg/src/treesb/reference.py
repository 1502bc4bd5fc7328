"""Brownian reference measure on a tree.

The reference coupling over vertices is Gaussian with independent edge
increments of variance ``sigma**2 * T_e``; its precision matrix is the
edge-weighted graph Laplacian.  Conditioning on the observed vertices gives a
Gaussian over the unobserved ones, and Brownian bridges fill in the edges.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import DimensionMismatch, SingularUnobservedBlock, TimeOutOfRange
from .tree import Tree

# interior times closer than this fraction of T_e to an endpoint are redrawn
ENDPOINT_MARGIN = 1e-6


@dataclass(frozen=True)
class GaussianConditional:
    """Law of the unobserved vertices given the observed ones.

    mean = ``mean_map @ y_S`` and covariance ``cov_factor @ cov_factor.T`` (the
    same for every spatial coordinate).
    """

    mean_map: np.ndarray
    cov_factor: np.ndarray

    @property
    def covariance(self) -> np.ndarray:
        return self.cov_factor @ self.cov_factor.T

    def mean(self, y_obs: np.ndarray) -> np.ndarray:
        return np.einsum("us,...sd->...ud", self.mean_map, y_obs)


@dataclass(frozen=True)
class TreePrecision:
    matrix: np.ndarray
    observed: tuple[int, ...]
    unobserved: tuple[int, ...]
    block_factor: np.ndarray | None  # lower Cholesky factor of L[U, U]
    conditional: GaussianConditional = field(repr=False)


def build_precision(tree: Tree) -> TreePrecision:
    n = tree.n_vertices
    L = np.zeros((n, n))
    for e in tree.edges:
        w = 1.0 / (tree.sigma**2 * e.length)
        L[e.u, e.v] -= w
        L[e.v, e.u] -= w
        L[e.u, e.u] += w
        L[e.v, e.v] += w

    obs, unobs = tree.observed, tree.unobserved
    if not unobs:
        cond = GaussianConditional(np.zeros((0, len(obs))), np.zeros((0, 0)))
        return TreePrecision(L, obs, unobs, None, cond)

    L_uu = L[np.ix_(unobs, unobs)]
    L_us = L[np.ix_(unobs, obs)]
    try:
        R = linalg.cholesky(L_uu, lower=True)
    except linalg.LinAlgError as exc:
        raise SingularUnobservedBlock(str(exc)) from None
    mean_map = -linalg.cho_solve((R, True), L_us)
    # A A^T = (R R^T)^-1 for A = R^-T
    cov_factor = linalg.solve_triangular(R, np.eye(len(unobs)), lower=True, trans="T")
    return TreePrecision(L, obs, unobs, R, GaussianConditional(mean_map, cov_factor))


def conditional_given_observed(
    prec: TreePrecision, y_obs: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Draw the unobserved vertex values given observed ones.

    ``y_obs`` has shape (..., |S|, d) with rows in ascending vertex order; the
    result has shape (..., |S^c|, d).
    """
    y_obs = np.asarray(y_obs, dtype=float)
    if y_obs.ndim < 2 or y_obs.shape[-2] != len(prec.observed):
        raise DimensionMismatch(
            f"expected (..., {len(prec.observed)}, d) observed values, got {y_obs.shape}"
        )
    out_shape = y_obs.shape[:-2] + (len(prec.unobserved), y_obs.shape[-1])
    if not prec.unobserved:
        return np.zeros(out_shape)
    cond = prec.conditional
    z = rng.standard_normal(out_shape)
    return cond.mean(y_obs) + np.einsum("uk,...kd->...ud", cond.cov_factor, z)


def sample_brownian_bridge(
    a: np.ndarray,
    b: np.ndarray,
    T: float,
    sigma: float,
    t: float | np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Brownian bridge from ``a`` at time 0 to ``b`` at time ``T``, evaluated at ``t``.

    ``t`` may be a scalar or one time per row of ``a``.  Endpoints are returned
    exactly.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > T):
        raise TimeOutOfRange(f"bridge time must lie in [0, {T}]")
    tt = t[..., None] if t.ndim and a.ndim > 1 else t
    frac = tt / T
    std = sigma * np.sqrt(tt * (T - tt) / T)
    x = a + frac * (b - a) + std * rng.standard_normal(np.broadcast_shapes(a.shape, np.shape(tt)))
    x = np.where(tt == 0, a, x)
    return np.where(tt == T, b, x)


def sample_interior_times(T: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform times on (0, T) with a margin of ``ENDPOINT_MARGIN * T`` at both ends."""
    t = rng.uniform(0.0, T, size=n)
    lo, hi = ENDPOINT_MARGIN * T, (1.0 - ENDPOINT_MARGIN) * T
    bad = (t < lo) | (t > hi)
    while bad.any():
        t[bad] = rng.uniform(0.0, T, size=int(bad.sum()))
        bad = (t < lo) | (t > hi)
    return t


@dataclass
class EdgeBridges:
    """Bridge points on one edge, ready for the bridge-matching loss."""

    edge: int
    length: float
    x_u: np.ndarray
    x_v: np.ndarray
    t: np.ndarray
    x_t: np.ndarray

    def __len__(self) -> int:
        return len(self.t)


@dataclass
class ReciprocalSample:
    vertex_values: np.ndarray  # (n, |V|, d), one joint draw per coupling row
    edges: list[EdgeBridges]


def fill_unobserved(
    tree: Tree, prec: TreePrecision, coupling_obs: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Complete (n, |S|, d) observed values to (n, |V|, d) with a conditional draw."""
    coupling_obs = np.asarray(coupling_obs, dtype=float)
    n, _, d = coupling_obs.shape
    values = np.empty((n, tree.n_vertices, d))
    values[:, list(prec.observed)] = coupling_obs
    if prec.unobserved:
        values[:, list(prec.unobserved)] = conditional_given_observed(prec, coupling_obs, rng)
    return values


def sample_reciprocal(
    tree: Tree,
    prec: TreePrecision,
    coupling_obs: np.ndarray,
    times_per_edge: int,
    rng: np.random.Generator,
    edges: list[int] | None = None,
) -> ReciprocalSample:
    """Mixture-of-bridges sample driven by an observed-vertex coupling.

    Each coupling row gets one draw of the unobserved vertices, shared by all
    edges, and ``times_per_edge`` bridge points on every requested edge.
    """
    if times_per_edge < 1:
        raise ValueError("times_per_edge must be >= 1")
    values = fill_unobserved(tree, prec, coupling_obs, rng)
    n = values.shape[0]
    out = []
    for k in range(len(tree.edges)) if edges is None else edges:
        e = tree.edges[k]
        x_u = np.repeat(values[:, e.u], times_per_edge, axis=0)
        x_v = np.repeat(values[:, e.v], times_per_edge, axis=0)
        t = sample_interior_times(e.length, n * times_per_edge, rng)
        x_t = sample_brownian_bridge(x_u, x_v, e.length, tree.sigma, t, rng)
        out.append(EdgeBridges(k, e.length, x_u, x_v, t, x_t))
    return ReciprocalSample(values, out)
