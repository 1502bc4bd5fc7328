"""Bidirectional bridge matching along one edge (the per-edge Markovian projection)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .drift_net import Architecture, DriftNet, OptimState, grad_step
from .errors import NonFiniteLoss, TimeAtTerminal
from .reference import EdgeBridges, TreePrecision, sample_reciprocal
from .tree import Tree

TERMINAL_MARGIN = 1e-6


def bm_target(x_t, x_end, t, T):
    """Regression target (x_end - x_t) / (T - t) of the bridge-matching loss."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t >= T - TERMINAL_MARGIN * T):
        raise TimeAtTerminal(f"bridge target undefined for t at or beyond {T} - margin")
    x_t = np.asarray(x_t, dtype=float)
    denom = (T - t)[..., None] if (t.ndim and x_t.ndim > 1) else T - t
    return (np.asarray(x_end, dtype=float) - x_t) / denom


@dataclass
class TrainingParams:
    steps: int = 10_000
    batch_size: int = 4096
    lr: float = 1e-3
    ema_decay: float = 0.99
    width_mult: float = 1.0
    times_per_edge: int = 1


@dataclass
class EdgeTrainer:
    """Forward (u -> v) and backward (v -> u) drift nets for one edge.

    Both nets take time normalised to [0, 1] in their own direction of travel.
    """

    edge: int
    u: int
    v: int
    length: float
    forward_net: DriftNet
    backward_net: DriftNet
    forward_opt: OptimState
    backward_opt: OptimState
    params: TrainingParams
    loss_trace: list[tuple[int, float, float]] = field(default_factory=list)

    @classmethod
    def create(cls, tree: Tree, edge: int, dim: int, params: TrainingParams, rng, dtype=np.float32):
        e = tree.edges[edge]
        arch = Architecture.scaled(dim, params.width_mult)
        fwd = DriftNet(arch, rng=rng, dtype=dtype)
        bwd = DriftNet(arch, rng=rng, dtype=dtype)
        return cls(
            edge,
            e.u,
            e.v,
            e.length,
            fwd,
            bwd,
            OptimState.for_net(fwd, params.lr, params.ema_decay),
            OptimState.for_net(bwd, params.lr, params.ema_decay),
            params,
        )

    def ema_nets(self) -> tuple[DriftNet, DriftNet]:
        """Frozen copies carrying the EMA shadow weights."""
        return (
            self.forward_net.with_params(self.forward_opt.ema),
            self.backward_net.with_params(self.backward_opt.ema),
        )

    def restart_optimizers(self) -> None:
        """Keep weights, reset Adam moments and EMA (used when warm starting)."""
        p = self.params
        self.forward_opt = OptimState.for_net(self.forward_net, p.lr, p.ema_decay)
        self.backward_opt = OptimState.for_net(self.backward_net, p.lr, p.ema_decay)
        self.loss_trace = []


def _half_loss(net: DriftNet, x_t, t_norm, target):
    n = len(target)

    def grad_fn(out):
        resid = out - target
        return float(np.sum(resid * resid) / n), 2.0 * resid / n

    return net.forward_backward(x_t, t_norm, grad_fn)


def bm_loss(trainer: EdgeTrainer, batch: EdgeBridges):
    """Joint forward + backward bridge-matching loss and its gradients.

    Returns ``(loss, forward_loss, backward_loss, grad_forward, grad_backward)``.
    The backward net sees reversed time s = T - t and regresses onto
    (x_u - x_t) / t.
    """
    if len(batch) == 0:
        raise ValueError("empty bridge batch")
    T = batch.length
    fwd_target = bm_target(batch.x_t, batch.x_v, batch.t, T)
    bwd_target = bm_target(batch.x_t, batch.x_u, T - batch.t, T)
    lf, gf = _half_loss(trainer.forward_net, batch.x_t, batch.t / T, fwd_target)
    lb, gb = _half_loss(trainer.backward_net, batch.x_t, (T - batch.t) / T, bwd_target)
    loss = lf + lb
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"edge {trainer.edge}: loss is {loss}")
    return loss, lf, lb, gf, gb


def train_edge(trainer: EdgeTrainer, batches: Iterable[EdgeBridges], steps: int) -> EdgeTrainer:
    """Run ``steps`` Adam steps on both nets; records (step, fwd, bwd) losses.

    A non-finite loss aborts before any parameter is touched, so the trainer
    keeps its last good state.
    """
    it = iter(batches)
    for _ in range(steps):
        batch = next(it)
        _, lf, lb, gf, gb = bm_loss(trainer, batch)
        grad_step(trainer.forward_net, trainer.forward_opt, gf)
        grad_step(trainer.backward_net, trainer.backward_opt, gb)
        trainer.loss_trace.append((trainer.forward_opt.step, lf, lb))
    return trainer


def edge_batches(
    tree: Tree,
    prec: TreePrecision,
    coupling_obs: np.ndarray,
    edge: int,
    batch_size: int,
    times_per_edge: int,
    rng: np.random.Generator,
) -> Iterator[EdgeBridges]:
    """Endless stream of fresh reciprocal batches for one edge.

    Every batch resamples coupling rows, the unobserved vertices and the bridge
    times; ``batch_size`` counts bridge points, so it is split over
    ``times_per_edge`` points per coupling row.
    """
    rows = max(1, batch_size // times_per_edge)
    n = coupling_obs.shape[0]
    while True:
        idx = rng.integers(0, n, size=rows)
        sample = sample_reciprocal(tree, prec, coupling_obs[idx], times_per_edge, rng, edges=[edge])
        yield sample.edges[0]
