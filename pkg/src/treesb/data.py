"""Marginal distributions: 2D shape generators, Gaussians and CSV sample files.

Every source owns a seed; its train and eval streams derive from that seed
under distinct spawn keys, so they never share generator state.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .errors import ConfigError, CsvParse, DataError, DimensionMismatch, EmptyFile

TRAIN = "train"
EVAL = "eval"
_SPLIT_KEYS = {TRAIN: 0, EVAL: 1}

DEFAULT_NOISE = 0.05
DEFAULT_SCALE = 7.0


def _moons(n, rng, noise=DEFAULT_NOISE):
    upper = rng.random(n) < 0.5
    t = rng.uniform(0.0, np.pi, n)
    x = np.where(upper, np.cos(t), 1.0 - np.cos(t))
    y = np.where(upper, np.sin(t), 0.5 - np.sin(t))
    pts = np.stack([x, y], axis=1) - (0.5, 0.25)
    return pts + noise * rng.standard_normal((n, 2))


def _circle(n, rng, noise=DEFAULT_NOISE, radius=1.0):
    t = rng.uniform(0.0, 2 * np.pi, n)
    pts = radius * np.stack([np.cos(t), np.sin(t)], axis=1)
    return pts + noise * rng.standard_normal((n, 2))


def _circles(n, rng, noise=DEFAULT_NOISE, factor=0.8):
    r = np.where(rng.random(n) < 0.5, 1.0, factor)
    t = rng.uniform(0.0, 2 * np.pi, n)
    pts = r[:, None] * np.stack([np.cos(t), np.sin(t)], axis=1)
    return pts + noise * rng.standard_normal((n, 2))


_SPIRAL_START, _SPIRAL_END = 1.5 * np.pi, 4.5 * np.pi


def _spiral_centre():
    a, b = _SPIRAL_START, _SPIRAL_END
    # antiderivatives of t cos t and t sin t
    cx = (b * np.sin(b) + np.cos(b)) - (a * np.sin(a) + np.cos(a))
    cy = (-b * np.cos(b) + np.sin(b)) - (-a * np.cos(a) + np.sin(a))
    return np.array([cx, cy]) / ((b - a) * b)


def _spiral(n, rng, noise=DEFAULT_NOISE):
    t = rng.uniform(_SPIRAL_START, _SPIRAL_END, n)
    pts = np.stack([t * np.cos(t), t * np.sin(t)], axis=1) / _SPIRAL_END
    return pts - _spiral_centre() + noise * rng.standard_normal((n, 2))


def _gaussian(n, rng, mean=(0.0, 0.0), cov=None):
    mean = np.asarray(mean, dtype=float)
    cov = np.eye(mean.size) if cov is None else np.asarray(cov, dtype=float)
    return rng.multivariate_normal(mean, cov, size=n, method="cholesky")


GENERATORS: dict[str, Callable[..., np.ndarray]] = {
    "moons": _moons,
    "circle": _circle,
    "circles": _circles,
    "spiral": _spiral,
    "gaussian": _gaussian,
}

# centred 2D shapes; scaled by DEFAULT_SCALE unless told otherwise
SHAPES = ("moons", "circle", "circles", "spiral")


@dataclass(frozen=True)
class CsvMarginal:
    """Empirical distribution of the rows of a CSV file, sampled with replacement."""

    data: np.ndarray
    path: str = ""

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.data[rng.integers(0, len(self.data), size=n)]


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_csv_marginal(path: str | Path) -> CsvMarginal:
    """Read a numeric CSV (optional header, detected by a non-numeric first row)."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = [(k + 1, r) for k, r in enumerate(csv.reader(fh)) if r and any(c.strip() for c in r)]
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except UnicodeDecodeError as exc:
        raise CsvParse(f"{path}: not UTF-8 text ({exc.reason})") from None
    if rows and not all(_is_number(c) for c in rows[0][1]):
        rows = rows[1:]
    if not rows:
        raise EmptyFile(f"{path}: no data rows")
    width = len(rows[0][1])
    data = np.empty((len(rows), width))
    for k, (line, row) in enumerate(rows):
        if len(row) != width:
            raise CsvParse(f"{path}: row {line} has {len(row)} fields, expected {width}")
        try:
            data[k] = [float(c) for c in row]
        except ValueError:
            raise CsvParse(f"{path}: row {line} has a non-numeric field") from None
    if not np.all(np.isfinite(data)):
        raise CsvParse(f"{path}: non-finite values")
    return CsvMarginal(data, str(path))


@dataclass(frozen=True)
class MarginalSource:
    """A seeded distribution at one observed vertex.

    ``kind`` is a generator name or ``"csv"`` (with ``params={"path": ...}``).
    Shape generators are centred by construction and multiplied by ``scale``.
    """

    kind: str
    seed: int
    scale: float | None = None
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind != "csv" and self.kind not in GENERATORS:
            raise ConfigError(f"unknown marginal kind {self.kind!r}")
        if self.kind == "csv" and "path" not in self.params:
            raise ConfigError("csv marginal needs params.path")
        if self.scale is None:
            object.__setattr__(self, "scale", DEFAULT_SCALE if self.kind in SHAPES else 1.0)
        if not self.scale > 0:
            raise ConfigError("scale must be positive")

    def seed_sequence(self, split: str) -> np.random.SeedSequence:
        if split not in _SPLIT_KEYS:
            raise ConfigError(f"unknown split {split!r}")
        return np.random.SeedSequence(self.seed, spawn_key=(_SPLIT_KEYS[split],))

    def stream(self, split: str) -> np.random.Generator:
        return np.random.default_rng(self.seed_sequence(split))

    def _csv(self) -> CsvMarginal:
        return load_csv_marginal(self.params["path"])

    @property
    def dim(self) -> int:
        if self.kind == "csv":
            return self._csv().dim
        if self.kind == "gaussian":
            return len(self.params.get("mean", (0.0, 0.0)))
        return 2

    def sampler(self, split: str) -> Callable[[int], np.ndarray]:
        """Stateful sampler: successive calls continue one stream."""
        rng = self.stream(split)
        if self.kind == "csv":
            table = self._csv()
            return lambda n: self.scale * table.sample(n, rng)
        return lambda n: sample_marginal(self, n, rng=rng)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "scale": self.scale, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "MarginalSource":
        unknown = set(d) - {"kind", "seed", "scale", "params"}
        if unknown:
            raise ConfigError(f"unknown marginal fields {sorted(unknown)}")
        try:
            scale = d.get("scale")
            return cls(d["kind"], int(d["seed"]), None if scale is None else float(scale), dict(d.get("params", {})))
        except KeyError as exc:
            raise ConfigError(f"marginal is missing {exc.args[0]!r}") from None


def sample_marginal(
    src: MarginalSource, n: int, split: str = TRAIN, rng: np.random.Generator | None = None
) -> np.ndarray:
    """``n`` scaled draws from ``src``; a fresh ``split`` stream unless ``rng`` is given."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if rng is None:
        rng = src.stream(split)
    if src.kind == "csv":
        return src.scale * src._csv().sample(n, rng)
    try:
        pts = GENERATORS[src.kind](n, rng, **src.params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {src.kind!r}: {exc}") from None
    if pts.ndim != 2:
        raise DimensionMismatch(f"generator {src.kind!r} returned shape {pts.shape}")
    return src.scale * pts
