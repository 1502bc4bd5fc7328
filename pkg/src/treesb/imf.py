"""Iterative Markovian fitting on a tree.

Each iteration trains a forward/backward drift pair on every edge from
reciprocal samples of the current observed-vertex coupling, then simulates the
learned process to regenerate the coupling pool.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .bridge_matching import EdgeTrainer, TrainingParams, edge_batches, train_edge
from .config import PROVIDED, ExperimentConfig
from .data import EVAL, TRAIN
from .drift_net import Architecture, DriftNet, load_checkpoint, save_checkpoint
from .errors import CheckpointMismatch, DataError, MarginalDimensionMismatch
from .metrics import self_ot, sinkhorn_divergence
from .reference import TreePrecision, build_precision
from .simulation import CouplingSamples, EdgeNets, generate_coupling
from .tree import Tree

# spawn-key purposes for the per-run random streams
_INIT, _NETS, _BATCHES, _SIMULATE = range(4)


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


@dataclass
class ImfState:
    tree: Tree
    precision: TreePrecision
    iteration: int
    coupling: CouplingSamples
    trainers: dict[int, EdgeTrainer] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)

    @property
    def observed_coupling(self) -> np.ndarray:
        """(n, |S|, d) pool that drives the next round of bridge matching."""
        return self.coupling.select(self.tree.observed)

    def nets(self) -> EdgeNets:
        """EMA nets keyed by directed pair: (u, v) forward, (v, u) backward."""
        out = {}
        for tr in self.trainers.values():
            fwd, bwd = tr.ema_nets()
            out[(tr.u, tr.v)] = fwd
            out[(tr.v, tr.u)] = bwd
        return out


def init_coupling(
    tree: Tree,
    samplers: dict[int, Callable[[int], np.ndarray]],
    n: int,
    mode: str = "independent",
    provided: CouplingSamples | None = None,
) -> CouplingSamples:
    """Initial coupling over the observed vertices.

    ``independent`` draws every column from its own marginal; ``provided``
    takes externally generated joint samples verbatim.
    """
    obs = tree.observed
    if mode == PROVIDED:
        if provided is None:
            raise ValueError("provided mode needs coupling samples")
        missing = set(obs) - set(provided.vertices)
        if missing:
            raise MarginalDimensionMismatch(f"provided coupling lacks vertices {sorted(missing)}")
        values = provided.select(obs)
        return CouplingSamples(values, obs, np.full(len(values), -1), 0)
    if mode != "independent":
        raise ValueError(f"unknown coupling mode {mode!r}")
    cols = [np.asarray(samplers[v](n), dtype=float) for v in obs]
    dims = {c.shape[1] for c in cols}
    if len(dims) != 1 or any(c.shape[0] != n for c in cols):
        raise MarginalDimensionMismatch(f"marginal samplers disagree: shapes {[c.shape for c in cols]}")
    return CouplingSamples(np.stack(cols, axis=1), obs, np.full(n, -1), 0)


def _train_task(args):
    tree, prec, coupling_obs, edge, params, seed, iteration, dtype, previous = args
    dim = coupling_obs.shape[2]
    if previous is None:
        trainer = EdgeTrainer.create(tree, edge, dim, params, _stream(seed, _NETS, iteration, edge), dtype)
    else:
        trainer = previous
        trainer.restart_optimizers()
    batches = edge_batches(
        tree,
        prec,
        coupling_obs,
        edge,
        params.batch_size,
        params.times_per_edge,
        _stream(seed, _BATCHES, iteration, edge),
    )
    return train_edge(trainer, batches, params.steps)


def train_all_edges(
    state: ImfState,
    params: TrainingParams,
    seed: int,
    iteration: int,
    dtype=np.float32,
    warm_start: bool = False,
    workers: int = 1,
) -> dict[int, EdgeTrainer]:
    """Markovian projection on every edge; results do not depend on ``workers``."""
    coupling_obs = state.observed_coupling
    tasks = [
        (
            state.tree,
            state.precision,
            coupling_obs,
            k,
            params,
            seed,
            iteration,
            dtype,
            state.trainers.get(k) if warm_start else None,
        )
        for k in range(len(state.tree.edges))
    ]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            trained = list(pool.map(_train_task, tasks))
    else:
        trained = [_train_task(t) for t in tasks]
    return dict(enumerate(trained))


def trailing_losses(trainer: EdgeTrainer, window: int = 100) -> tuple[float, float]:
    """Mean (forward, backward) loss over the last ``window`` steps."""
    if not trainer.loss_trace:
        return float("nan"), float("nan")
    tail = np.array(trainer.loss_trace[-window:])
    return float(tail[:, 1].mean()), float(tail[:, 2].mean())


@dataclass
class HeldOut:
    """Two independent eval halves per observed vertex plus cached self terms."""

    first: dict[int, np.ndarray]
    second: dict[int, np.ndarray]
    self_first: dict[int, float]
    baseline: dict[int, float]

    @classmethod
    def draw(cls, samplers, vertices, n, epsilon, tol) -> "HeldOut":
        first, second, self_first, baseline = {}, {}, {}, {}
        for v in vertices:
            draw = np.asarray(samplers[v](2 * n), dtype=float)
            first[v], second[v] = draw[:n], draw[n:]
            self_first[v] = self_ot(first[v], epsilon, tol=tol)
            baseline[v] = sinkhorn_divergence(
                first[v], second[v], epsilon, tol=tol, self_terms=(self_first[v], None)
            )
        return cls(first, second, self_first, baseline)


def marginal_divergences(
    coupling: CouplingSamples, tree: Tree, held_out: HeldOut, n: int, epsilon: float, tol: float
) -> dict[str, dict[str, float]]:
    """SD between held-out data at each observed j and samples at j simulated from each i != j."""
    out: dict[str, dict[str, float]] = {}
    for j in tree.observed:
        row = {}
        for i in tree.observed:
            if i == j:
                continue
            sim = coupling.rows_from(i).at(j)[:n]
            if len(sim) < 2:
                continue
            row[str(i)] = sinkhorn_divergence(
                sim, held_out.first[j], epsilon, tol=tol, self_terms=(None, held_out.self_first[j])
            )
        out[str(j)] = row
    return out


def _edge_name(tree: Tree, k: int) -> str:
    e = tree.edges[k]
    return f"{e.u}_{e.v}"


def write_iteration(directory: Path, state: ImfState) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for k, tr in sorted(state.trainers.items()):
        name = _edge_name(state.tree, k)
        save_checkpoint(directory / f"edge_{name}_fwd.ckpt", tr.forward_net, tr.forward_opt)
        save_checkpoint(directory / f"edge_{name}_bwd.ckpt", tr.backward_net, tr.backward_opt)
        with (directory / f"loss_edge_{name}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "forward_loss", "backward_loss"])
            w.writerows((s, repr(lf), repr(lb)) for s, lf, lb in tr.loss_trace)


def load_iteration_nets(tree: Tree, directory: str | Path, dim: int, width_mult: float, dtype=np.float32) -> EdgeNets:
    """EMA nets from one ``iter_{n}`` checkpoint directory."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: no such checkpoint directory")
    arch = Architecture.scaled(dim, width_mult)
    nets = {}
    for e in tree.edges:
        for tag, key in (("fwd", (e.u, e.v)), ("bwd", (e.v, e.u))):
            path = directory / f"edge_{e.u}_{e.v}_{tag}.ckpt"
            if not path.exists():
                raise CheckpointMismatch(f"{path}: missing checkpoint for edge ({e.u}, {e.v})")
            _, _, ema = load_checkpoint(path, expect=arch)
            nets[key] = DriftNet(arch, ema, dtype=dtype)
    return nets


def run_imf(
    config: ExperimentConfig,
    output_dir: str | Path | None = None,
    iterations: int | None = None,
    workers: int = 1,
    on_iteration: Callable[[ImfState], None] | None = None,
    evaluate: bool = True,
) -> ImfState:
    """Run the IMF loop described by ``config``.

    With ``output_dir`` set, writes the effective config, the initial
    coupling, per-iteration checkpoints, loss traces and coupling pools,
    ``metrics.jsonl`` (deterministic) and ``timings.jsonl`` (wall clock).
    """
    tree = config.build_tree()
    prec = build_precision(tree)
    n_iter = config.imf.iterations if iterations is None else iterations
    dtype = np.dtype(config.dtype)
    ev = config.evaluation
    train_samplers = {v: src.sampler(TRAIN) for v, src in config.marginals.items()}
    eval_samplers = {v: src.sampler(EVAL) for v, src in config.marginals.items()}

    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(config.to_json() + "\n")
        for name in ("metrics.jsonl", "timings.jsonl"):
            (out / name).write_text("")

    provided = CouplingSamples.load_csv(config.imf.init_path) if config.imf.init == PROVIDED else None
    coupling = init_coupling(tree, train_samplers, config.imf.pool_size, config.imf.init, provided)
    if out is not None:
        coupling.export_csv(out / "initial_coupling", {"seed": config.seed, "start_policy": "independent"})
    state = ImfState(tree, prec, 0, coupling)
    if n_iter == 0:
        return state

    held_out = None
    if evaluate:
        held_out = HeldOut.draw(eval_samplers, tree.observed, ev.samples, ev.sinkhorn_eps, ev.sinkhorn_tol)

    for it in range(1, n_iter + 1):
        t0 = time.perf_counter()
        state.trainers = train_all_edges(
            state, config.training, config.seed, it, dtype, config.imf.warm_start, workers
        )
        t1 = time.perf_counter()
        state.coupling = generate_coupling(
            tree,
            state.nets(),
            train_samplers,
            config.imf.pool_size,
            config.imf.start_policy,
            _stream(config.seed, _SIMULATE, it),
            iteration=it,
            steps_per_edge=config.simulation.steps_per_edge,
        )
        state.iteration = it
        t2 = time.perf_counter()
        record = {
            "iteration": it,
            "edge_losses": {
                _edge_name(tree, k): dict(zip(("forward", "backward"), trailing_losses(tr)))
                for k, tr in sorted(state.trainers.items())
            },
        }
        if held_out is not None:
            record["marginal_sinkhorn"] = marginal_divergences(
                state.coupling, tree, held_out, ev.samples, ev.sinkhorn_eps, ev.sinkhorn_tol
            )
            record["baseline_sinkhorn"] = {str(v): held_out.baseline[v] for v in tree.observed}
        state.history.append(record)
        t3 = time.perf_counter()
        if out is not None:
            it_dir = out / f"iter_{it}"
            write_iteration(it_dir, state)
            state.coupling.export_csv(
                it_dir / "coupling",
                {"seed": config.seed, "start_policy": config.imf.start_policy},
            )
            with (out / "metrics.jsonl").open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            with (out / "timings.jsonl").open("a") as fh:
                timing = {"iteration": it, "train_s": t1 - t0, "simulate_s": t2 - t1, "evaluate_s": t3 - t2}
                fh.write(json.dumps(timing) + "\n")
        if on_iteration is not None:
            on_iteration(state)
    return state


def default_workers(tree: Tree) -> int:
    return max(1, min(len(tree.edges), os.cpu_count() or 1))
