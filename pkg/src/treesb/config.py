"""Declarative experiment description, read from and written to JSON."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .bridge_matching import TrainingParams
from .data import MarginalSource
from .errors import ConfigError, DataError
from .simulation import EQUAL_SPLIT, ROTATION
from .tree import Tree, tree_from_config

INDEPENDENT = "independent"
PROVIDED = "provided"
ORACLES = ("none", "grid", "gaussian", "coupling_1d")


@dataclass
class ImfParams:
    iterations: int = 6
    pool_size: int = 10_000
    start_policy: str = EQUAL_SPLIT
    warm_start: bool = False
    init: str = INDEPENDENT
    init_path: str | None = None  # coupling directory for init="provided"


@dataclass
class SimulationParams:
    steps_per_edge: int = 50


@dataclass
class EvaluationParams:
    sinkhorn_eps: float = 0.01
    sinkhorn_tol: float = 1e-3
    samples: int = 2000
    oracle: str = "none"
    oracle_params: dict[str, Any] = field(default_factory=dict)


def _section(cls, raw: dict | None, name: str):
    raw = dict(raw or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown {name} fields {sorted(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad {name} section: {exc}") from None


@dataclass
class ExperimentConfig:
    tree: dict[str, Any]
    marginals: dict[int, MarginalSource]
    seed: int
    output_dir: str = "out"
    training: TrainingParams = field(default_factory=TrainingParams)
    imf: ImfParams = field(default_factory=ImfParams)
    simulation: SimulationParams = field(default_factory=SimulationParams)
    evaluation: EvaluationParams = field(default_factory=EvaluationParams)
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def build_tree(self) -> Tree:
        return tree_from_config(self.tree)

    def validate(self) -> None:
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer")
        tree = self.build_tree()
        missing = set(tree.observed) - set(self.marginals)
        extra = set(self.marginals) - set(tree.observed)
        if missing:
            raise ConfigError(f"no marginal for observed vertices {sorted(missing)}")
        if extra:
            raise ConfigError(f"marginals given for unobserved or unknown vertices {sorted(extra)}")
        dims = {src.dim for src in self.marginals.values() if src.kind != "csv"}
        if len(dims) > 1:
            raise ConfigError(f"marginals disagree on dimension: {sorted(dims)}")
        t, m, s, e = self.training, self.imf, self.simulation, self.evaluation
        if t.steps < 0 or t.batch_size < 1 or t.times_per_edge < 1 or not t.lr > 0:
            raise ConfigError("training needs steps >= 0, batch_size >= 1, times_per_edge >= 1 and lr > 0")
        if not 0.0 <= t.ema_decay < 1.0 or not t.width_mult > 0:
            raise ConfigError("training needs 0 <= ema_decay < 1 and width_mult > 0")
        if m.iterations < 0 or m.pool_size < 1:
            raise ConfigError("imf needs iterations >= 0 and pool_size >= 1")
        if m.start_policy not in (EQUAL_SPLIT, ROTATION):
            raise ConfigError(f"unknown start policy {m.start_policy!r}")
        if m.init not in (INDEPENDENT, PROVIDED):
            raise ConfigError(f"unknown initial coupling mode {m.init!r}")
        if m.init == PROVIDED and not m.init_path:
            raise ConfigError("imf.init='provided' needs imf.init_path")
        if s.steps_per_edge < 1:
            raise ConfigError("simulation.steps_per_edge must be >= 1")
        if not e.sinkhorn_eps > 0 or e.samples < 2:
            raise ConfigError("evaluation needs sinkhorn_eps > 0 and samples >= 2")
        if e.oracle not in ORACLES:
            raise ConfigError(f"unknown oracle {e.oracle!r}; choose from {ORACLES}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def to_dict(self) -> dict[str, Any]:
        return {
            "tree": self.tree,
            "marginals": {str(v): src.to_dict() for v, src in sorted(self.marginals.items())},
            "seed": self.seed,
            "output_dir": self.output_dir,
            "training": dataclasses.asdict(self.training),
            "imf": dataclasses.asdict(self.imf),
            "simulation": dataclasses.asdict(self.simulation),
            "evaluation": dataclasses.asdict(self.evaluation),
            "dtype": self.dtype,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "ExperimentConfig":
        known = {"tree", "marginals", "seed", "output_dir", "training", "imf", "simulation", "evaluation", "dtype"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        for key in ("tree", "marginals", "seed"):
            if key not in raw:
                raise ConfigError(f"config is missing {key!r}")
        try:
            marginals = {int(v): MarginalSource.from_dict(src) for v, src in raw["marginals"].items()}
        except (AttributeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad marginals section: {exc}") from None
        return cls(
            tree=raw["tree"],
            marginals=marginals,
            seed=raw["seed"],
            output_dir=raw.get("output_dir", "out"),
            training=_section(TrainingParams, raw.get("training"), "training"),
            imf=_section(ImfParams, raw.get("imf"), "imf"),
            simulation=_section(SimulationParams, raw.get("simulation"), "simulation"),
            evaluation=_section(EvaluationParams, raw.get("evaluation"), "evaluation"),
            dtype=raw.get("dtype", "float32"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"{path}: no such config file") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw)
