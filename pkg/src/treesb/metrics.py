"""Sample-based evaluation metrics.

Sinkhorn divergence between point clouds (log-domain, epsilon annealing),
the Bures-Wasserstein distance between Gaussian moment fits, and the
BW2-UVP / L2-UVP percentages.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import optimize
from scipy.spatial.distance import cdist

from .errors import DegenerateReference, DimensionMismatch, NonPSDInput, NotConvergedWarning


@dataclass(frozen=True)
class EmpiricalMoments:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    @classmethod
    def from_samples(cls, x: np.ndarray) -> "EmpiricalMoments":
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[0] < 1:
            raise DimensionMismatch(f"expected a nonempty (n, d) sample array, got {x.shape}")
        mean = x.mean(axis=0)
        xc = x - mean
        cov = xc.T @ xc / max(x.shape[0] - 1, 1)
        return cls(mean, cov, x.shape[0])

    @property
    def variance(self) -> float:
        """Total variance, the trace of the covariance."""
        return float(np.trace(self.cov))


@dataclass(frozen=True)
class SinkhornResult:
    value: float
    f: np.ndarray
    g: np.ndarray
    marginal_error: float
    iterations: int
    converged: bool


def _softmin(C, h, eps, axis):
    """-eps * log sum_j exp((h_j - C_ij) / eps) along ``axis`` of C."""
    hh = h.astype(C.dtype, copy=False)
    M = (hh[None, :] - C) if axis == 1 else (hh[:, None] - C)
    M *= C.dtype.type(1.0 / eps)
    mx = M.max(axis=axis, keepdims=True)
    M -= mx
    np.exp(M, out=M)
    s = M.sum(axis=axis, dtype=np.float64)
    return -eps * (np.log(s) + np.squeeze(mx, axis=axis).astype(np.float64))


def _weights(w, n):
    if w is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(w, dtype=float)
    return w / w.sum()


def _eps_schedule(C, eps, scaling):
    eps0 = max(float(C.max()), eps)
    out = []
    e = eps0
    while e > eps:
        out.append(e)
        e *= scaling
    out.append(eps)
    return out


class _SemiDual:
    """Negated semi-dual objective in the column potential g, with its gradient.

    One pass over the kernel gives the row potential f = softmin(g), the value
    <a, f> + <b, g>, and the column marginal of the induced plan.
    """

    def __init__(self, C, a, b, epsilon):
        self.C = C
        self.a = a
        self.b = b
        self.lb = np.log(b)
        self.eps = epsilon
        self.error = np.inf
        self.evaluations = 0
        self.best = None

    def __call__(self, g):
        C, eps = self.C, self.eps
        M = (g + eps * self.lb).astype(C.dtype)[None, :] - C
        M *= C.dtype.type(1.0 / eps)
        mx = M.max(axis=1)
        M -= mx[:, None]
        np.exp(M, out=M)
        s = M.sum(axis=1, dtype=np.float64)
        f = -eps * (np.log(s) + mx.astype(np.float64))
        col = (self.a / s).astype(C.dtype) @ M
        grad = self.b - col.astype(np.float64)
        value = float(self.a @ f + self.b @ g)
        self.evaluations += 1
        self.error = float(np.abs(grad).sum())
        if self.best is None or self.error < self.best[0]:
            self.best = (self.error, value, f, g.copy())
        return -value, -grad


def entropic_ot(
    x: np.ndarray,
    y: np.ndarray,
    epsilon: float,
    a=None,
    b=None,
    max_iter: int = 5000,
    tol: float = 1e-3,
    scaling: float = 0.5,
    dtype=np.float32,
) -> SinkhornResult:
    """Entropic OT cost for the squared Euclidean cost.

    The value is the dual objective <a, f> + <b, g>, i.e. the primal cost plus
    ``epsilon`` times KL(plan | a x b).  Potentials are warm-started by
    annealing epsilon from the squared diameter down by ``scaling`` per level
    with symmetric log-domain Sinkhorn updates; the semi-dual is then
    maximised with L-BFGS until the L1 column-marginal violation drops below
    ``tol`` or ``max_iter`` objective evaluations are spent.  At small epsilon
    on thin supports plain Sinkhorn needs thousands of sweeps, L-BFGS a few
    hundred.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.shape[1] != y.shape[1]:
        raise DimensionMismatch(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    a = _weights(a, len(x))
    b = _weights(b, len(y))
    la, lb = np.log(a), np.log(b)
    C = cdist(x, y, "sqeuclidean").astype(dtype, copy=False)

    f = np.zeros(len(x))
    g = np.zeros(len(y))
    for e in _eps_schedule(C, epsilon, scaling):
        ft = _softmin(C, g + e * lb, e, axis=1)
        gt = _softmin(C, f + e * la, e, axis=0)
        f, g = 0.5 * (f + ft), 0.5 * (g + gt)

    problem = _SemiDual(C, a, b, epsilon)
    problem(g)

    def stop(intermediate_result):
        if problem.error < tol:
            raise StopIteration

    if problem.error >= tol and max_iter > 1:
        optimize.minimize(
            problem,
            g,
            jac=True,
            method="L-BFGS-B",
            callback=stop,
            options={"maxiter": max_iter, "maxfun": max_iter - 1, "maxcor": 20, "gtol": 0.0, "ftol": 0.0},
        )
    err, value, f, g = problem.best
    converged = err < tol
    if not converged:
        warnings.warn(
            f"entropic OT stopped after {problem.evaluations} evaluations with marginal error {err:.3g}",
            NotConvergedWarning,
            stacklevel=2,
        )
    return SinkhornResult(value, f, g, err, problem.evaluations, converged)


def _canonical(x, y):
    kx = (x.shape, x.tobytes())
    ky = (y.shape, y.tobytes())
    return (y, x) if ky < kx else (x, y)


def sinkhorn_divergence(
    x: np.ndarray,
    y: np.ndarray,
    epsilon_reg: float = 0.01,
    max_iter: int = 5000,
    tol: float = 1e-3,
    debiased: bool = True,
    dtype=np.float32,
    self_terms: tuple[float | None, float | None] = (None, None),
) -> float:
    """Debiased Sinkhorn divergence OT(x, y) - OT(x, x)/2 - OT(y, y)/2.

    Cost is the full squared Euclidean distance.  With ``debiased=False`` the
    raw entropic cost OT(x, y) is returned.  ``self_terms`` lets callers reuse
    previously computed OT(x, x) and OT(y, y).  The result does not depend on
    argument order, bit for bit.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if len(x) < 2 or len(y) < 2:
        raise DimensionMismatch("need at least two points per cloud")
    if not epsilon_reg > 0:
        raise ValueError("epsilon_reg must be positive")
    kw = dict(max_iter=max_iter, tol=tol, dtype=dtype)
    p, q = _canonical(x, y)
    sp, sq = self_terms if p is x else self_terms[::-1]
    cross = entropic_ot(p, q, epsilon_reg, **kw).value
    if not debiased:
        return cross
    if sp is None:
        sp = self_ot(p, epsilon_reg, **kw)
    if sq is None:
        sq = self_ot(q, epsilon_reg, **kw)
    return cross - 0.5 * sp - 0.5 * sq


def self_ot(x: np.ndarray, epsilon: float, max_iter: int = 5000, tol: float = 1e-3, dtype=np.float32) -> float:
    """OT_eps(x, x)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return entropic_ot(x, x, epsilon, max_iter=max_iter, tol=tol, dtype=dtype).value


def _sqrtm_psd(S: np.ndarray) -> np.ndarray:
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    scale = max(float(np.max(np.abs(w))), 1e-300)
    if np.min(w) < -1e-8 * scale:
        raise NonPSDInput(f"matrix has eigenvalue {np.min(w):.3g}")
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def bw2_squared(p: EmpiricalMoments, q: EmpiricalMoments) -> float:
    """Squared W2 distance between the Gaussians with the given moments."""
    rp = _sqrtm_psd(p.cov)
    cross = _sqrtm_psd(rp @ q.cov @ rp)
    mean_term = float(np.sum((p.mean - q.mean) ** 2))
    cov_term = float(np.trace(p.cov) + np.trace(q.cov) - 2.0 * np.trace(cross))
    return mean_term + max(cov_term, 0.0)


def bw2_uvp(samples: np.ndarray, reference: np.ndarray) -> float:
    """100 * BW2^2(samples, reference) / (Var(reference) / 2), in percent."""
    p = EmpiricalMoments.from_samples(samples)
    q = EmpiricalMoments.from_samples(reference)
    if not q.variance > 0:
        raise DegenerateReference("reference cloud has zero variance")
    return 100.0 * bw2_squared(p, q) / (0.5 * q.variance)


def l2_uvp(
    x: np.ndarray,
    mapped: np.ndarray,
    oracle_map: Callable[[np.ndarray], np.ndarray],
    reference_variance: float,
) -> float:
    """100 * mean ||mapped - oracle_map(x)||^2 / reference_variance, in percent."""
    if not reference_variance > 0:
        raise DegenerateReference("reference variance must be positive")
    diff = np.asarray(mapped, dtype=float) - oracle_map(np.asarray(x, dtype=float))
    return 100.0 * float(np.mean(np.sum(diff * diff, axis=1))) / reference_variance
