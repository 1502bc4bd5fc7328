"""Command-line interface: ``treesb run|eval|oracle|gen-data|export``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import oracles
from .config import ExperimentConfig
from .data import EVAL, GENERATORS, TRAIN, MarginalSource, load_csv_marginal, sample_marginal
from .errors import ConfigError, DataError, NumericalError, TreeSBError
from .imf import default_workers, load_iteration_nets, run_imf
from .metrics import bw2_uvp, sinkhorn_divergence
from .simulation import EQUAL_SPLIT, generate_coupling

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _fail(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def _write_json(obj, output: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if output:
        Path(output).write_text(text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------- run


def cmd_run(args) -> int:
    config = ExperimentConfig.load(args.config)
    out = Path(args.output or config.output_dir)
    tree = config.build_tree()
    workers = args.workers if args.workers is not None else default_workers(tree)
    state = run_imf(config, out, iterations=args.iterations, workers=workers)
    print(json.dumps({"output_dir": str(out), "iterations": state.iteration}))
    return EXIT_OK


# ---------------------------------------------------------------- eval


def _simulate_from_checkpoint(config: ExperimentConfig, checkpoint: Path, n_per_start: int, seed: int):
    tree = config.build_tree()
    dim = next(iter(config.marginals.values())).dim
    nets = load_iteration_nets(tree, checkpoint, dim, config.training.width_mult, np.dtype(config.dtype))
    samplers = {v: src.sampler(EVAL) for v, src in config.marginals.items()}
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(99,)))
    coupling = generate_coupling(
        tree,
        nets,
        samplers,
        n_per_start * len(tree.observed),
        EQUAL_SPLIT,
        rng,
        steps_per_edge=config.simulation.steps_per_edge,
    )
    return tree, coupling


def cmd_eval(args) -> int:
    config = ExperimentConfig.load(args.config)
    checkpoint = Path(args.checkpoint)
    if args.reference is not None and not Path(args.reference).is_file():
        raise DataError(f"{args.reference}: no such reference file")
    n = args.n or config.evaluation.samples
    tree, coupling = _simulate_from_checkpoint(config, checkpoint, n, config.seed)
    vertex = args.vertex if args.vertex is not None else (tree.unobserved or tree.observed)[0]
    if vertex not in tree.vertices:
        raise ConfigError(f"vertex {vertex} is not in the tree")
    if args.reference is not None:
        reference = load_csv_marginal(args.reference).data
    elif vertex in config.marginals:
        reference = sample_marginal(config.marginals[vertex], n, EVAL)
    else:
        raise ConfigError(f"vertex {vertex} has no data; pass --reference")

    ev = config.evaluation
    result: dict = {"metric": args.metric, "vertex": vertex, "checkpoint": str(checkpoint)}
    clouds = {"all": coupling.at(vertex)}
    if args.per_start_vertex:
        clouds = {str(s): coupling.rows_from(s).at(vertex) for s in tree.observed if s != vertex}
    values = {}
    for name, cloud in clouds.items():
        if args.metric == "sinkhorn":
            values[name] = sinkhorn_divergence(cloud[:n], reference[:n], ev.sinkhorn_eps, tol=ev.sinkhorn_tol)
        else:
            values[name] = bw2_uvp(cloud, reference)
    result["value" if not args.per_start_vertex else "per_start_vertex"] = (
        values["all"] if not args.per_start_vertex else values
    )
    _write_json(result, args.output)
    return EXIT_OK


# ---------------------------------------------------------------- oracle


def _parse_kv(text: str) -> dict[str, str]:
    out = {}
    for part in filter(None, (text or "").split(",")):
        if "=" not in part:
            raise ConfigError(f"expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_oracle(args) -> int:
    if args.kind == "gaussian-bary":
        params = _parse_kv(args.instance)
        try:
            seed, dim, count = int(params.get("seed", 0)), int(params.get("d", 2)), int(params.get("k", 3))
        except ValueError as exc:
            raise ConfigError(f"bad instance parameters: {exc}") from None
        specs = oracles.random_gaussian_instance(seed, dim, count)
        weights = [float(w) for w in args.weights.split(",")] if args.weights else [1.0 / count] * count
        bary = oracles.gaussian_fixed_point_barycentre(specs, weights)
        _write_json(
            {"weights": weights, "marginals": [s.to_dict() for s in specs], "barycentre": bary.to_dict()},
            args.output,
        )
        return EXIT_OK

    if args.kind == "grid-bary":
        if not args.config:
            raise ConfigError("grid-bary needs --config with a star tree")
        config = ExperimentConfig.load(args.config)
        tree = config.build_tree()
        if tree.unobserved != (0,) or any(0 not in (e.u, e.v) for e in tree.edges):
            raise ConfigError("grid-bary needs a star tree with unobserved centre 0")
        weights = np.array([1.0 / e.length for e in sorted(tree.edges, key=lambda e: max(e.u, e.v))])
        clouds = [sample_marginal(config.marginals[v], args.n, EVAL) for v in tree.observed]
        grid = oracles.Grid2D.covering(clouds, args.size)
        res = oracles.grid_entropic_barycentre(clouds, weights, tree.epsilon, grid=grid)
        out = Path(args.output or "grid_barycentre.csv")
        with out.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "mass"])
            pts = grid.points()
            w.writerows((repr(px), repr(py), repr(m)) for (px, py), m in zip(pts, res.hist.ravel()))
        print(json.dumps({"output": str(out), "sweeps": res.iterations, "shape": list(grid.shape)}))
        return EXIT_OK

    if args.kind == "coupling-1d":
        mu = [float(v) for v in args.mu.split(",")]
        nu = [float(v) for v in args.nu.split(",")]
        lo = min(mu[0] - 8 * mu[1], nu[0] - 8 * nu[1])
        hi = max(mu[0] + 8 * mu[1], nu[0] + 8 * nu[1])
        grid = np.linspace(lo, hi, args.size)
        res = oracles.grid_entropic_coupling_1d(
            grid,
            oracles.gaussian_histogram(mu[0], mu[1], grid),
            grid,
            oracles.gaussian_histogram(nu[0], nu[1], grid),
            2.0 * args.sigma**2 * args.length,
        )
        mx, my, vx, vy, cxy = res.moments()
        _write_json(
            {"correlation": res.correlation, "mean": [mx, my], "var": [vx, vy], "cov": cxy},
            args.output,
        )
        return EXIT_OK
    raise ConfigError(f"unknown oracle {args.kind!r}")


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(args) -> int:
    src = MarginalSource(args.kind, args.seed, args.scale)
    x = sample_marginal(src, args.n, args.split)
    np.savetxt(args.output, x, delimiter=",", fmt="%.17g")
    return EXIT_OK


# ---------------------------------------------------------------- export


def cmd_export(args) -> int:
    run = Path(args.run_dir)
    metrics_path = run / "metrics.jsonl"
    if not metrics_path.is_file():
        raise DataError(f"{metrics_path}: not found")
    out = Path(args.output or run / "plot_data")
    out.mkdir(parents=True, exist_ok=True)
    records = [json.loads(line) for line in metrics_path.read_text().splitlines() if line.strip()]

    with (out / "marginal_sinkhorn.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "vertex", "start", "sinkhorn", "baseline"])
        for r in records:
            for v, row in r.get("marginal_sinkhorn", {}).items():
                for s, val in row.items():
                    w.writerow([r["iteration"], v, s, repr(val), repr(r["baseline_sinkhorn"][v])])

    with (out / "losses.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "edge", "step", "forward_loss", "backward_loss"])
        for r in records:
            for path in sorted((run / f"iter_{r['iteration']}").glob("loss_edge_*.csv")):
                edge = path.stem[len("loss_edge_") :]
                with path.open() as src:
                    rows = csv.reader(src)
                    next(rows)
                    w.writerows([r["iteration"], edge, *row] for row in rows)

    with (out / "samples.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        header_done = False
        for r in records:
            cdir = run / f"iter_{r['iteration']}" / "coupling"
            manifest = json.loads((cdir / "manifest.json").read_text())
            start = np.loadtxt(cdir / "start.csv", dtype=int, ndmin=1)
            keep = slice(0, min(len(start), args.max_rows))
            for v in manifest["vertices"]:
                vals = np.loadtxt(cdir / f"vertex_{v}.csv", delimiter=",", ndmin=2)[keep]
                if not header_done:
                    w.writerow(["iteration", "vertex", "start", *[f"x{k}" for k in range(vals.shape[1])]])
                    header_done = True
                w.writerows([r["iteration"], v, s, *map(repr, row)] for s, row in zip(start[keep], vals))
    print(json.dumps({"output": str(out)}))
    return EXIT_OK


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="treesb", description="Tree Schrödinger bridges by iterative Markovian fitting.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run IMF from a JSON config")
    r.add_argument("config")
    r.add_argument("--output", help="output directory (overrides config.output_dir)")
    r.add_argument("--iterations", type=int, help="override imf.iterations")
    r.add_argument("--workers", type=int, help="parallel edge trainers (default: min(#edges, #cpus))")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="evaluate an iteration's checkpoints on fresh samples")
    e.add_argument("checkpoint", help="an iter_N directory")
    e.add_argument("--config", required=True)
    e.add_argument("--metric", choices=("sinkhorn", "bw2-uvp"), default="sinkhorn")
    e.add_argument("--reference", help="CSV of reference samples")
    e.add_argument("--vertex", type=int, help="vertex to evaluate (default: first unobserved)")
    e.add_argument("--per-start-vertex", action="store_true")
    e.add_argument("--n", type=int, help="samples per start vertex")
    e.add_argument("--output")
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("oracle", help="compute a ground truth")
    o.add_argument("kind", choices=("gaussian-bary", "grid-bary", "coupling-1d"))
    o.add_argument("--instance", default="", help="gaussian-bary: seed=S,d=D,k=K")
    o.add_argument("--weights", help="comma-separated barycentre weights")
    o.add_argument("--config", help="grid-bary: experiment config with a star tree")
    o.add_argument("--size", type=int, default=128, help="grid cells per axis")
    o.add_argument("--n", type=int, default=20_000, help="grid-bary: samples per marginal")
    o.add_argument("--mu", default="0,1", help="coupling-1d: mean,std of the source")
    o.add_argument("--nu", default="1,1.5", help="coupling-1d: mean,std of the target")
    o.add_argument("--sigma", type=float, default=0.5)
    o.add_argument("--length", type=float, default=1.0, help="coupling-1d: edge length T")
    o.add_argument("--output")
    o.set_defaults(func=cmd_oracle)

    g = sub.add_parser("gen-data", help="write samples of a generator to CSV")
    g.add_argument("kind", choices=sorted(GENERATORS))
    g.add_argument("--n", type=int, default=10_000)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--scale", type=float)
    g.add_argument("--split", choices=(TRAIN, EVAL), default=TRAIN)
    g.add_argument("--output", required=True)
    g.set_defaults(func=cmd_gen_data)

    x = sub.add_parser("export", help="tidy CSVs for plotting from a run directory")
    x.add_argument("run_dir")
    x.add_argument("--output")
    x.add_argument("--max-rows", type=int, default=5000, help="coupling rows per iteration")
    x.set_defaults(func=cmd_export)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except NumericalError as exc:
        return _fail("numeric", exc, EXIT_NUMERIC)
    except ValueError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except (DataError, OSError) as exc:
        return _fail("io", exc, EXIT_IO)
    except TreeSBError as exc:
        return _fail("error", exc, EXIT_NUMERIC)


if __name__ == "__main__":
    sys.exit(main())
