"""Feed-forward drift network v(x, t) with explicit backpropagation.

Architecture: a spatial MLP embeds x into 32 dims, a sinusoidal encoding of t
goes through its own MLP into 32 dims, and a trunk MLP maps the concatenation
back to the spatial dimension.  Parameters live in one flat float64 vector;
forward and backward passes run at a configurable working precision.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointMismatch, DataError, DimensionMismatch, NonFiniteGradient

SPATIAL_HIDDEN = (128, 256)
TIME_HIDDEN = (128, 256)
TRUNK_HIDDEN = (512, 256, 128)
EMBED_DIM = 32
N_FREQS = 16
MAX_FREQ = 100.0


def sigmoid(z):
    # tanh form: bounded for any input and vectorised well for float32
    s = np.tanh(0.5 * z)
    s += 1.0
    s *= 0.5
    return s


def silu(z):
    return z * sigmoid(z)


def silu_grad(z, s=None):
    """Derivative of SiLU; ``s`` is sigmoid(z) when already known."""
    if s is None:
        s = sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def time_features(t: np.ndarray, n_freqs: int = N_FREQS, dtype=np.float64) -> np.ndarray:
    """sin/cos encoding of t in [0, 1] at log-spaced angular frequencies 1..MAX_FREQ."""
    freqs = np.geomspace(1.0, MAX_FREQ, n_freqs).astype(dtype)
    arg = np.asarray(t, dtype=dtype)[:, None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _scaled(widths, mult):
    return tuple(max(1, int(round(w * mult))) for w in widths)


@dataclass(frozen=True)
class Architecture:
    dim: int
    spatial_hidden: tuple[int, ...] = SPATIAL_HIDDEN
    time_hidden: tuple[int, ...] = TIME_HIDDEN
    trunk_hidden: tuple[int, ...] = TRUNK_HIDDEN
    embed_dim: int = EMBED_DIM
    n_freqs: int = N_FREQS

    @classmethod
    def scaled(cls, dim: int, width_mult: float = 1.0) -> "Architecture":
        return cls(
            dim,
            _scaled(SPATIAL_HIDDEN, width_mult),
            _scaled(TIME_HIDDEN, width_mult),
            _scaled(TRUNK_HIDDEN, width_mult),
        )

    def blocks(self) -> list[list[tuple[int, int]]]:
        """(fan_in, fan_out) per layer for the spatial, time and trunk MLPs."""

        def chain(sizes):
            return list(zip(sizes[:-1], sizes[1:]))

        return [
            chain((self.dim, *self.spatial_hidden, self.embed_dim)),
            chain((2 * self.n_freqs, *self.time_hidden, self.embed_dim)),
            chain((2 * self.embed_dim, *self.trunk_hidden, self.dim)),
        ]

    @property
    def n_params(self) -> int:
        return sum(i * o + o for block in self.blocks() for i, o in block)

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "spatial_hidden": list(self.spatial_hidden),
            "time_hidden": list(self.time_hidden),
            "trunk_hidden": list(self.trunk_hidden),
            "embed_dim": self.embed_dim,
            "n_freqs": self.n_freqs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(
            int(d["dim"]),
            tuple(d["spatial_hidden"]),
            tuple(d["time_hidden"]),
            tuple(d["trunk_hidden"]),
            int(d["embed_dim"]),
            int(d["n_freqs"]),
        )


def _unflatten(arch: Architecture, theta: np.ndarray):
    blocks, pos = [], 0
    for block in arch.blocks():
        layers = []
        for fan_in, fan_out in block:
            W = theta[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            b = theta[pos : pos + fan_out]
            pos += fan_out
            layers.append((W, b))
        blocks.append(layers)
    return blocks


def _mlp_forward(layers, h):
    inputs, pre = [], []
    for i, (W, b) in enumerate(layers):
        inputs.append(h)
        z = h @ W
        z += b
        if i < len(layers) - 1:
            s = sigmoid(z)
            pre.append((z, s))
            h = z * s
        else:
            h = z
    return h, (inputs, pre)


def _mlp_backward(layers, cache, dout, grads):
    inputs, pre = cache
    dz = dout
    for i in reversed(range(len(layers))):
        W, _ = layers[i]
        gW, gb = grads[i]
        gW[...] = inputs[i].T @ dz
        gb[...] = dz.sum(axis=0)
        if i == 0:
            return dz @ W.T
        dz = dz @ W.T
        dz *= silu_grad(*pre[i - 1])
    return None


def init_params(arch: Architecture, rng: np.random.Generator) -> np.ndarray:
    """Fan-in scaled uniform weights, zero biases, zero final trunk layer."""
    theta = np.zeros(arch.n_params)
    blocks = _unflatten(arch, theta)
    for layers in blocks:
        for W, _ in layers:
            limit = np.sqrt(3.0 / W.shape[0])
            W[...] = rng.uniform(-limit, limit, size=W.shape)
    blocks[2][-1][0][...] = 0.0
    return theta


class DriftNet:
    """Drift v_theta(x, t) with time pre-normalised to [0, 1].

    Parameters
    ----------
    arch : Architecture
        Layer sizes.
    theta : ndarray, optional
        Flat float64 parameter vector; freshly initialised from ``rng`` if omitted.
    dtype : numpy dtype
        Working precision of forward/backward passes.
    """

    def __init__(self, arch: Architecture, theta=None, rng=None, dtype=np.float32):
        self.arch = arch
        if theta is None:
            theta = init_params(arch, rng if rng is not None else np.random.default_rng())
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (arch.n_params,):
            raise DimensionMismatch(f"expected {arch.n_params} parameters, got {theta.shape}")
        self.theta = theta
        self.dtype = np.dtype(dtype)

    @property
    def dim(self) -> int:
        return self.arch.dim

    def with_params(self, theta: np.ndarray) -> "DriftNet":
        return DriftNet(self.arch, np.array(theta, dtype=np.float64), dtype=self.dtype)

    def _check(self, x, t):
        x = np.asarray(x)
        t = np.asarray(t)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionMismatch(f"expected x of shape (batch, {self.dim}), got {x.shape}")
        if t.ndim == 0:
            t = np.full(x.shape[0], float(t))
        if t.shape != (x.shape[0],):
            raise DimensionMismatch(f"expected {x.shape[0]} times, got {t.shape}")
        return x.astype(self.dtype, copy=False), t

    def _forward(self, x, t):
        x, t = self._check(x, t)
        spatial, temporal, trunk = _unflatten(self.arch, self.theta.astype(self.dtype))
        hx, cx = _mlp_forward(spatial, x)
        ht, ct = _mlp_forward(temporal, time_features(t, self.arch.n_freqs, self.dtype))
        out, ck = _mlp_forward(trunk, np.concatenate([hx, ht], axis=1))
        return out, (spatial, temporal, trunk, cx, ct, ck)

    def forward(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        out, _ = self._forward(x, t)
        return out.astype(np.float64)

    __call__ = forward

    def forward_backward(self, x, t, grad_fn):
        """Run forward, get dL/dout from ``grad_fn(out)``, return (extra, dL/dtheta).

        ``grad_fn`` receives the float64 output and returns ``(extra, dout)``.
        """
        out, (spatial, temporal, trunk, cx, ct, ck) = self._forward(x, t)
        extra, dout = grad_fn(out.astype(np.float64))
        grad = np.zeros(self.arch.n_params, dtype=self.dtype)
        g_spatial, g_temporal, g_trunk = _unflatten(self.arch, grad)
        dh = _mlp_backward(trunk, ck, np.asarray(dout, dtype=self.dtype), g_trunk)
        e = self.arch.embed_dim
        _mlp_backward(spatial, cx, dh[:, :e], g_spatial)
        _mlp_backward(temporal, ct, dh[:, e:], g_temporal)
        return extra, grad.astype(np.float64)


@dataclass
class OptimState:
    """Adam moments plus an exponential-moving-average shadow of the parameters."""

    m: np.ndarray
    v: np.ndarray
    ema: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.99

    @classmethod
    def for_net(cls, net: DriftNet, lr=1e-3, ema_decay=0.99, beta1=0.9, beta2=0.999, eps=1e-8):
        n = net.arch.n_params
        return cls(np.zeros(n), np.zeros(n), net.theta.copy(), 0, lr, beta1, beta2, eps, ema_decay)


def grad_step(net: DriftNet, opt: OptimState, grad: np.ndarray) -> tuple[DriftNet, OptimState]:
    """One Adam step with bias correction followed by the EMA update (in place)."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != net.theta.shape:
        raise DimensionMismatch(f"gradient shape {grad.shape} != parameter shape {net.theta.shape}")
    if not np.all(np.isfinite(grad)):
        bad = int(np.count_nonzero(~np.isfinite(grad)))
        raise NonFiniteGradient(f"{bad} non-finite gradient entries at step {opt.step + 1}")
    opt.step += 1
    opt.m *= opt.beta1
    opt.m += (1.0 - opt.beta1) * grad
    opt.v *= opt.beta2
    opt.v += (1.0 - opt.beta2) * grad * grad
    m_hat = opt.m / (1.0 - opt.beta1**opt.step)
    v_hat = opt.v / (1.0 - opt.beta2**opt.step)
    net.theta -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    if opt.ema_decay == 0.0:
        opt.ema[...] = net.theta
    else:
        opt.ema += (1.0 - opt.ema_decay) * (net.theta - opt.ema)
    return net, opt


# checkpoints: one JSON header line, then little-endian float64 theta followed by ema


def save_checkpoint(path: str | Path, net: DriftNet, opt: OptimState | None = None) -> None:
    ema = opt.ema if opt is not None else net.theta
    header = {
        "format": "treesb-driftnet-1",
        "architecture": net.arch.to_dict(),
        "n_params": net.arch.n_params,
        "step": opt.step if opt is not None else 0,
        "ema_decay": opt.ema_decay if opt is not None else None,
        "layout": ["theta", "ema"],
    }
    buf = io.BytesIO()
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    buf.write(np.asarray(net.theta, dtype="<f8").tobytes())
    buf.write(np.asarray(ema, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path, expect: Architecture | None = None):
    """Return ``(header, theta, ema)``."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: bad checkpoint header: {exc}") from None
    arch = Architecture.from_dict(header["architecture"])
    if expect is not None and arch != expect:
        raise CheckpointMismatch(f"{path}: architecture {arch} does not match {expect}")
    n = header["n_params"]
    body = np.frombuffer(raw[nl + 1 :], dtype="<f8")
    if body.size != 2 * n:
        raise DataError(f"{path}: expected {2 * n} floats, found {body.size}")
    return header, body[:n].astype(np.float64), body[n:].astype(np.float64)
