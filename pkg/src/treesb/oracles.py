"""Independent ground truths used to validate learned solutions.

* Gaussian barycentres by the covariance fixed-point iteration, and Gaussian
  OT maps in closed form.
* A fixed-support entropic barycentre on a 2D grid (star-tree multi-marginal
  Sinkhorn in the log domain with separable Gaussian kernels).
* A 1D grid entropic coupling between two histograms.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import (
    DimensionMismatch,
    GridTooSmall,
    MaxIterExceeded,
    NonPositiveWeight,
    NonPSDInput,
    NotConverged,
    NotConvergedWarning,
    WeightsNotNormalised,
)


def _check_weights(weights, count: int) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.shape != (count,):
        raise DimensionMismatch(f"expected {count} weights, got {w.shape}")
    if np.any(w < 0):
        raise NonPositiveWeight("weights must be non-negative")
    if abs(w.sum() - 1.0) > 1e-9:
        raise WeightsNotNormalised(f"weights sum to {w.sum()!r}, not 1")
    return w


def _sym_sqrt(S: np.ndarray, inverse: bool = False) -> np.ndarray:
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if np.min(w) <= 0:
        raise NonPSDInput(f"matrix is not positive definite (min eigenvalue {np.min(w):.3g})")
    r = np.sqrt(w)
    if inverse:
        r = 1.0 / r
    return (V * r) @ V.T


@dataclass(frozen=True)
class GaussianSpec:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise DimensionMismatch(f"covariance {cov.shape} does not match mean of size {mean.size}")
        if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12):
            raise NonPSDInput("covariance is not symmetric")
        if np.min(np.linalg.eigvalsh(cov)) <= 0:
            raise NonPSDInput("covariance is not positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        L = np.linalg.cholesky(self.cov)
        return self.mean + rng.standard_normal((n, self.dim)) @ L.T

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianSpec":
        return cls(np.array(d["mean"], dtype=float), np.array(d["cov"], dtype=float))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def random_gaussian_instance(
    seed: int, dim: int, count: int = 3, eig_range: tuple[float, float] = (0.5, 2.0)
) -> list[GaussianSpec]:
    """Random Gaussians: covariances Q diag(l) Q^T with Q Haar-orthogonal and
    l log-uniform in ``eig_range``; means standard normal."""
    rng = np.random.default_rng(seed)
    out = []
    lo, hi = np.log(eig_range[0]), np.log(eig_range[1])
    for _ in range(count):
        Z = rng.standard_normal((dim, dim))
        Q, R = np.linalg.qr(Z)
        Q = Q * np.sign(np.diag(R))
        lam = np.exp(rng.uniform(lo, hi, size=dim))
        cov = (Q * lam) @ Q.T
        out.append(GaussianSpec(rng.standard_normal(dim), 0.5 * (cov + cov.T)))
    return out


def gaussian_fixed_point_barycentre(
    specs: Sequence[GaussianSpec],
    weights,
    tol: float = 1e-10,
    max_iter: int = 1000,
) -> GaussianSpec:
    """W2 barycentre of Gaussians.

    The covariance is iterated from the identity with
    S <- S^{-1/2} (sum_i w_i (S^{1/2} S_i S^{1/2})^{1/2})^2 S^{-1/2}
    until successive iterates differ by less than ``tol`` in Frobenius norm.
    """
    w = _check_weights(weights, len(specs))
    dim = specs[0].dim
    if any(s.dim != dim for s in specs):
        raise DimensionMismatch("all Gaussians must share one dimension")
    mean = sum(wi * s.mean for wi, s in zip(w, specs))
    S = np.eye(dim)
    for _ in range(max_iter):
        root = _sym_sqrt(S)
        inv_root = _sym_sqrt(S, inverse=True)
        M = sum(wi * _sym_sqrt(root @ s.cov @ root) for wi, s in zip(w, specs) if wi > 0)
        S_new = inv_root @ M @ M @ inv_root
        S_new = 0.5 * (S_new + S_new.T)
        step = np.linalg.norm(S_new - S)
        S = S_new
        if step < tol:
            return GaussianSpec(mean, S)
    raise MaxIterExceeded(f"fixed-point iteration did not reach tol {tol} in {max_iter} steps")


@dataclass(frozen=True)
class AffineMap:
    """x -> offset + (x - centre) @ matrix.T"""

    matrix: np.ndarray
    centre: np.ndarray
    offset: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.offset + (np.asarray(x, dtype=float) - self.centre) @ self.matrix.T

    @property
    def translation(self) -> np.ndarray:
        """b in the form x -> A x + b."""
        return self.offset - self.matrix @ self.centre


def gaussian_ot_map(source: GaussianSpec, target: GaussianSpec) -> AffineMap:
    """Optimal quadratic-cost transport map between two Gaussians."""
    if source.dim != target.dim:
        raise DimensionMismatch(f"dimension mismatch: {source.dim} vs {target.dim}")
    rs = _sym_sqrt(source.cov)
    irs = _sym_sqrt(source.cov, inverse=True)
    A = irs @ _sym_sqrt(rs @ target.cov @ rs) @ irs
    return AffineMap(0.5 * (A + A.T), source.mean, target.mean)


# ---------------------------------------------------------------------------
# fixed-support 2D barycentre


@dataclass(frozen=True)
class Grid2D:
    """Regular grid of cell centres; ``xs`` along axis 0, ``ys`` along axis 1."""

    xs: np.ndarray
    ys: np.ndarray

    @classmethod
    def covering(cls, clouds: Sequence[np.ndarray], size: int = 128, margin: float = 1.2) -> "Grid2D":
        """Grid spanning ``margin`` times the joint bounding box of ``clouds``."""
        pts = np.concatenate([np.asarray(c, dtype=float) for c in clouds])
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise DimensionMismatch("grid oracle needs 2D point clouds")
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        mid, half = 0.5 * (lo + hi), 0.5 * margin * (hi - lo)
        half = np.maximum(half, 1e-12)
        return cls(
            np.linspace(mid[0] - half[0], mid[0] + half[0], size),
            np.linspace(mid[1] - half[1], mid[1] + half[1], size),
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.xs.size, self.ys.size)

    @property
    def spacing(self) -> tuple[float, float]:
        return (float(self.xs[1] - self.xs[0]), float(self.ys[1] - self.ys[0]))

    def points(self) -> np.ndarray:
        X, Y = np.meshgrid(self.xs, self.ys, indexing="ij")
        return np.stack([X.ravel(), Y.ravel()], axis=1)

    def histogram(self, x: np.ndarray, weights=None) -> np.ndarray:
        """Nearest-cell histogram of a point cloud, normalised to mass 1."""
        x = np.asarray(x, dtype=float)
        hx, hy = self.spacing
        i = np.rint((x[:, 0] - self.xs[0]) / hx).astype(int)
        j = np.rint((x[:, 1] - self.ys[0]) / hy).astype(int)
        if np.any((i < 0) | (i >= self.xs.size) | (j < 0) | (j >= self.ys.size)):
            raise GridTooSmall("point cloud extends beyond the grid")
        w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=float)
        H = np.zeros(self.shape)
        np.add.at(H, (i, j), w)
        return H / H.sum()

    def sample(self, hist: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw cells by mass, then jitter uniformly within each cell."""
        p = np.asarray(hist, dtype=float).ravel()
        cells = rng.choice(p.size, size=n, p=p / p.sum())
        i, j = np.unravel_index(cells, self.shape)
        hx, hy = self.spacing
        jitter = rng.uniform(-0.5, 0.5, size=(n, 2)) * (hx, hy)
        return np.stack([self.xs[i], self.ys[j]], axis=1) + jitter

    def to_dict(self) -> dict:
        return {"xs": self.xs.tolist(), "ys": self.ys.tolist()}


# dynamic range beyond which exp(F - max F) may underflow in float64
_SAFE_RANGE = 600.0


def _log_matvec(K, logK, F):
    """out[i, b] = log sum_a K[i, a] exp(F[a, b]), exact in the log domain.

    Each column is shifted by its maximum and multiplied through ``K``; columns
    whose spread could underflow, or that come out as -inf despite finite
    input, are redone with a direct log-sum-exp.
    """
    finite = np.isfinite(F)
    has_mass = finite.any(axis=0)
    top = np.where(has_mass, np.max(F, axis=0, initial=-np.inf), 0.0)
    low = np.min(np.where(finite, F, np.inf), axis=0)
    with np.errstate(divide="ignore", invalid="ignore", under="ignore"):
        out = np.log(K @ np.exp(F - top)) + top
    redo = has_mass & ((top - low > _SAFE_RANGE) | ~np.isfinite(out).all(axis=0))
    if redo.any():
        cols = np.flatnonzero(redo)
        out[:, cols] = logsumexp(logK[:, :, None] + F[None, :, cols], axis=1)
    out[:, ~has_mass] = -np.inf
    return out


def _log_conv(kernels, logF):
    """log of sum_{a,b} K_x[i,a] K_y[j,b] exp(logF[a,b]) on the grid."""
    (Kx, logKx), (Ky, logKy) = kernels
    tmp = _log_matvec(Kx, logKx, logF)
    return _log_matvec(Ky, logKy, tmp.T).T


def _log_kernels(grid: Grid2D, scale: float):
    dx = grid.xs[:, None] - grid.xs[None, :]
    dy = grid.ys[:, None] - grid.ys[None, :]
    lx, ly = -scale * dx * dx, -scale * dy * dy
    return (np.exp(lx), lx), (np.exp(ly), ly)


@dataclass(frozen=True)
class GridBarycentre:
    """Centre histogram of the grid barycentre plus what is needed to sample it.

    ``weights`` and ``log_potentials`` cover the marginals with nonzero weight.
    """

    grid: Grid2D
    hist: np.ndarray
    iterations: int
    change: float
    epsilon_reg: float = 0.0
    weights: tuple[float, ...] = ()
    log_potentials: tuple[np.ndarray, ...] = field(default=(), repr=False)

    def sample(self, n: int, rng: np.random.Generator, refine: bool = True) -> np.ndarray:
        """Draw ``n`` centre samples.

        With ``refine`` (the default), a centre cell is drawn from the
        histogram, one grid point per marginal is drawn from the plan given
        that cell, and the centre is redrawn from its exact Gaussian law given
        those points, so samples resolve structure finer than one cell.
        Without it, samples are the cell centre plus uniform jitter.
        """
        if not refine or not self.weights:
            return self.grid.sample(self.hist, n, rng)
        p = self.hist.ravel()
        cells = rng.choice(p.size, size=n, p=p / p.sum())
        ci, cj = np.unravel_index(cells, self.grid.shape)
        total = sum(self.weights)
        mean = np.zeros((n, 2))
        for w, log_phi in zip(self.weights, self.log_potentials):
            scale = w / self.epsilon_reg
            lx = -scale * (self.grid.xs[:, None] - self.grid.xs[None, :]) ** 2
            ly = -scale * (self.grid.ys[:, None] - self.grid.ys[None, :]) ** 2
            picks = _draw_given_centre(lx, ly, log_phi, ci, cj, rng)
            pi, pj = np.unravel_index(picks, self.grid.shape)
            mean += w * np.stack([self.grid.xs[pi], self.grid.ys[pj]], axis=1)
        std = np.sqrt(self.epsilon_reg / (2.0 * total))
        return mean / total + std * rng.standard_normal((n, 2))


def _draw_given_centre(lx, ly, log_phi, ci, cj, rng):
    """Flat grid index per row, drawn with log-weight lx[ci, a] + ly[cj, b] + log_phi[a, b]."""
    out = np.empty(len(ci), dtype=np.int64)
    keys = ci * ly.shape[0] + cj
    for key in np.unique(keys):
        rows = np.flatnonzero(keys == key)
        a, b = divmod(int(key), ly.shape[0])
        logits = lx[a][:, None] + ly[b][None, :] + log_phi
        prob = np.exp(logits - logits.max()).ravel()
        cdf = np.cumsum(prob)
        u = rng.uniform(0.0, cdf[-1], size=len(rows))
        out[rows] = np.minimum(np.searchsorted(cdf, u, side="right"), cdf.size - 1)
    return out


def grid_entropic_barycentre(
    marginals: Sequence[np.ndarray],
    weights,
    epsilon_reg: float,
    grid: Grid2D | None = None,
    marginal_weights: Sequence[np.ndarray | None] | None = None,
    tol: float = 1e-6,
    max_iter: int = 5000,
    boundary_mass: float = 1e-6,
    relaxation: float = 1.0,
) -> GridBarycentre:
    """Entropic barycentre of 2D point clouds on a fixed grid.

    Solves the star multi-marginal problem with kernels
    exp(-w_i |z - x|^2 / epsilon_reg) between the centre z and marginal i, all
    supported on the grid (so the centre carries the uniform grid measure).
    Each sweep updates every marginal potential in turn; the sweep stops once
    consecutive barycentre histograms differ by less than ``tol`` in total
    variation.
    """
    k = len(marginals)
    w = _check_weights(weights, k)
    if not epsilon_reg > 0:
        raise ValueError("epsilon_reg must be positive")
    if grid is None:
        grid = Grid2D.covering(marginals)
    mw = marginal_weights or [None] * k
    with np.errstate(divide="ignore"):
        log_mu = [np.log(grid.histogram(m, wt)) for m, wt in zip(marginals, mw)]
    active = [i for i in range(k) if w[i] > 0]
    kernels = {i: _log_kernels(grid, w[i] / epsilon_reg) for i in active}
    log_phi = {i: np.where(np.isfinite(log_mu[i]), 0.0, -np.inf) for i in active}
    log_conv = {i: _log_conv(kernels[i], log_phi[i]) for i in active}

    def centre():
        log_nu = sum(log_conv[i] for i in active)
        log_nu = log_nu - logsumexp(log_nu)
        return np.exp(log_nu)

    nu = centre()
    change = np.inf
    for it in range(1, max_iter + 1):
        for i in active:
            others = sum((log_conv[j] for j in active if j != i), np.zeros(grid.shape))
            back = _log_conv(kernels[i], others)
            with np.errstate(invalid="ignore"):
                target = log_mu[i] - back
                mixed = (1.0 - relaxation) * log_phi[i] + relaxation * target
                log_phi[i] = np.where(np.isfinite(log_mu[i]), mixed, -np.inf)
            log_conv[i] = _log_conv(kernels[i], log_phi[i])
        new = centre()
        change = 0.5 * float(np.abs(new - nu).sum())
        nu = new
        if change < tol:
            break
    else:
        raise MaxIterExceeded(f"grid barycentre still moving by {change:.3g} (TV) after {max_iter} sweeps")
    edge = np.zeros(grid.shape, dtype=bool)
    edge[0, :] = edge[-1, :] = edge[:, 0] = edge[:, -1] = True
    if nu[edge].sum() >= boundary_mass:
        raise GridTooSmall(f"barycentre puts mass {nu[edge].sum():.3g} on the boundary cells")
    return GridBarycentre(
        grid, nu, it, change, epsilon_reg, tuple(float(w[i]) for i in active), tuple(log_phi[i] for i in active)
    )


# ---------------------------------------------------------------------------
# 1D entropic coupling


@dataclass(frozen=True)
class GridCoupling:
    x: np.ndarray
    y: np.ndarray
    plan: np.ndarray  # plan[i, j] = mass at (x[i], y[j])
    marginal_error: float

    def moments(self) -> tuple[float, float, float, float, float]:
        """(mean_x, mean_y, var_x, var_y, cov_xy) of the discrete plan."""
        P = self.plan
        px, py = P.sum(axis=1), P.sum(axis=0)
        mx, my = px @ self.x, py @ self.y
        vx = px @ (self.x - mx) ** 2
        vy = py @ (self.y - my) ** 2
        cxy = (self.x - mx) @ P @ (self.y - my)
        return float(mx), float(my), float(vx), float(vy), float(cxy)

    @property
    def correlation(self) -> float:
        _, _, vx, vy, cxy = self.moments()
        return cxy / np.sqrt(vx * vy)

    def mutual_information(self) -> float:
        P = self.plan
        prod = np.outer(P.sum(axis=1), P.sum(axis=0))
        m = P > 0
        return float(np.sum(P[m] * np.log(P[m] / prod[m])))


def grid_entropic_coupling_1d(
    x: np.ndarray,
    mu: np.ndarray,
    y: np.ndarray,
    nu: np.ndarray,
    epsilon: float,
    tol: float = 1e-10,
    max_iter: int = 100_000,
) -> GridCoupling:
    """Entropic OT plan for cost |x - y|^2 between two 1D histograms.

    Minimises <P, C> + epsilon KL(P | mu x nu).  For a Brownian bridge with
    scale sigma over time T, ``epsilon = 2 sigma^2 T`` gives its static
    coupling.
    """
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    mu, nu = np.asarray(mu, dtype=float), np.asarray(nu, dtype=float)
    if mu.shape != x.shape or nu.shape != y.shape:
        raise DimensionMismatch("histogram weights must match their support")
    mu, nu = mu / mu.sum(), nu / nu.sum()
    with np.errstate(divide="ignore"):
        lmu, lnu = np.log(mu), np.log(nu)
    logK = -((x[:, None] - y[None, :]) ** 2) / epsilon
    f = np.zeros_like(x)
    g = np.zeros_like(y)
    err = np.inf
    for _ in range(max_iter):
        f = -logsumexp(logK + (g + lnu)[None, :], axis=1)
        g = -logsumexp(logK + (f + lmu)[:, None], axis=0)
        logP = logK + (f + lmu)[:, None] + (g + lnu)[None, :]
        err = float(np.abs(np.exp(logsumexp(logP, axis=1)) - mu).sum())
        if err < tol:
            break
    else:
        warnings.warn(f"1D coupling marginal error {err:.3g} after {max_iter} sweeps", NotConvergedWarning, stacklevel=2)
        if not err < 1e3 * tol:
            raise NotConverged(f"1D coupling marginal error {err:.3g} after {max_iter} sweeps")
    return GridCoupling(x, y, np.exp(logP), err)


def gaussian_histogram(mean: float, std: float, grid: np.ndarray) -> np.ndarray:
    """Normalised Gaussian density weights on a 1D grid."""
    w = np.exp(-0.5 * ((np.asarray(grid, dtype=float) - mean) / std) ** 2)
    return w / w.sum()
