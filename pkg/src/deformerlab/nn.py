"""A small trainable-network core with hand-derived backpropagation.

Layers operate on 2D arrays ``(rows, features)``. A shared per-point MLP over
grouped neighbourhoods is just a :class:`Dense` stack applied to the flattened
``(clouds * groups * k, channels)`` array, with batch statistics taken over all
rows (the usual point-cloud convention).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateBatchError, FormatError, ShapeError, StateError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class Dense:
    """Fully connected layer ``y = relu(bn(W x + b))`` with optional BN and ReLU."""

    def __init__(self, n_in: int, n_out: int, relu: bool = False, batchnorm: bool = False,
                 rng: Optional[np.random.Generator] = None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.relu, self.batchnorm = relu, batchnorm
        limit = np.sqrt(6.0 / (n_in + n_out))
        self.params: Dict[str, np.ndarray] = {
            "W": rng.uniform(-limit, limit, size=(n_out, n_in)).astype(dtype),
            "b": np.zeros(n_out, dtype=dtype),
        }
        if batchnorm:
            self.params["gamma"] = np.ones(n_out, dtype=dtype)
            self.params["beta"] = np.zeros(n_out, dtype=dtype)
            self.running_mean = np.zeros(n_out, dtype=dtype)
            self.running_var = np.ones(n_out, dtype=dtype)
        self.grads: Dict[str, np.ndarray] = {}
        self._cache = None

    @property
    def dtype(self):
        return self.params["W"].dtype

    def astype(self, dtype) -> "Dense":
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        if self.batchnorm:
            self.running_mean = self.running_mean.astype(dtype)
            self.running_var = self.running_var.astype(dtype)
        return self

    def forward(self, x: np.ndarray, training: bool = False, batch_stats: bool = True) -> np.ndarray:
        """Training mode caches for :meth:`backward`. With ``batch_stats=False`` a
        training pass normalizes with the running statistics and leaves them
        unchanged (frozen batch norm, usable for single-row batches)."""
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"dense layer expects (*, {self.n_in}), got {x.shape}")
        p = self.params
        z = x @ p["W"].T
        z += p["b"]
        xhat = inv = None
        use_batch = training and batch_stats
        if self.batchnorm:
            if use_batch:
                if x.shape[0] < 2:
                    raise DegenerateBatchError("batch normalization needs at least 2 rows in training mode")
                mu = z.mean(axis=0)
                z -= mu
                var = np.mean(z * z, axis=0)
                self.running_mean *= 1.0 - BN_MOMENTUM
                self.running_mean += BN_MOMENTUM * mu
                self.running_var *= 1.0 - BN_MOMENTUM
                self.running_var += BN_MOMENTUM * var
            else:
                z -= self.running_mean
                var = self.running_var
            inv = (1.0 / np.sqrt(var + BN_EPS)).astype(z.dtype)
            z *= inv
            xhat = z if not training else z.copy()
            z *= p["gamma"]
            z += p["beta"]
        if self.relu:
            np.maximum(z, 0, out=z)
        if training:
            self._cache = (x, xhat, inv, z if self.relu else None, use_batch)
        return z

    def backward(self, gy: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients into ``self.grads`` and return d(loss)/d(input)."""
        if self._cache is None:
            raise StateError("backward called without a cached training-mode forward pass")
        x, xhat, inv, out, batch = self._cache
        p = self.params
        g = gy
        if self.relu:
            g = np.where(out > 0, g, 0).astype(gy.dtype, copy=False)
        if self.batchnorm:
            self.grads["gamma"] = np.sum(g * xhat, axis=0)
            self.grads["beta"] = g.sum(axis=0)
            g = g * p["gamma"]
            if batch:
                # d/dz of (z - mean) * inv with batch statistics
                g = g - g.mean(axis=0) - xhat * (np.sum(g * xhat, axis=0) / g.shape[0])
            g *= inv
        self.grads["W"] = g.T @ x
        self.grads["b"] = g.sum(axis=0)
        return g @ p["W"]

    def clear_cache(self):
        self._cache = None


class MLP:
    """Stack of :class:`Dense` layers; the last layer can be a bare linear output."""

    def __init__(self, widths: Sequence[int], rng=None, dtype=np.float64, linear_output: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers: List[Dense] = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = linear_output and i == len(widths) - 2
            self.layers.append(Dense(a, b, relu=not last, batchnorm=not last, rng=rng, dtype=dtype))

    def forward(self, x, training=False, batch_stats=True):
        for layer in self.layers:
            x = layer.forward(x, training, batch_stats)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def parameters(self) -> Iterable[Tuple[Dense, str]]:
        for layer in self.layers:
            for name in layer.params:
                yield layer, name


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over all elements of ``(pred - target)**2``."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shape mismatch {pred.shape} vs {target.shape}")
    d = pred - target
    return float(np.mean(d * d))


def mse_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    if pred.shape != target.shape:
        raise ShapeError(f"mse shape mismatch {pred.shape} vs {target.shape}")
    return (2.0 / pred.size) * (pred - target)


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float) -> Tuple[Sequence[np.ndarray], AdamState]:
    """In-place bias-corrected Adam update; returns ``(params, state)`` for convenience."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state must have matching lengths")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"parameter/gradient shape mismatch {p.shape} vs {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    initial_lr: float = 1e-3
    decay_factor: float = 0.1
    decay_every: int = 50

    def __post_init__(self):
        if not self.initial_lr > 0 or not 0 < self.decay_factor < 1 or self.decay_every < 1:
            raise ValueError(f"invalid learning-rate schedule {self}")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Step decay with 0-based epochs: ``initial * factor ** (epoch // every)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return schedule.initial_lr * schedule.decay_factor ** (epoch // schedule.decay_every)


# --- DFNM checkpoints -------------------------------------------------------

MODEL_MAGIC = b"DFNM"
MODEL_VERSION = 1
_TAG_DENSE = 1


def _layer_arrays(layer: Dense) -> List[np.ndarray]:
    arrs = [layer.params["W"], layer.params["b"]]
    if layer.batchnorm:
        arrs += [layer.params["gamma"], layer.params["beta"], layer.running_mean, layer.running_var]
    return arrs


def save_checkpoint(path, layers: Sequence[Dense], config: Optional[dict] = None) -> None:
    """Write layers (plus an optional JSON architecture record) as a DFNM file.

    Layout, little-endian: magic, u32 version, u32 layer count, per layer
    ``(u8 tag, u32 n_in, u32 n_out, u8 flags)`` with flags bit0 = relu and
    bit1 = batchnorm, then u32 length + UTF-8 JSON config, then every layer's
    W, b[, gamma, beta, running_mean, running_var] as f32 in order.
    """
    buf = bytearray(MODEL_MAGIC)
    buf += struct.pack("<II", MODEL_VERSION, len(layers))
    for layer in layers:
        flags = (1 if layer.relu else 0) | (2 if layer.batchnorm else 0)
        buf += struct.pack("<BIIB", _TAG_DENSE, layer.n_in, layer.n_out, flags)
    blob = json.dumps(config or {}, sort_keys=True).encode()
    buf += struct.pack("<I", len(blob)) + blob
    for layer in layers:
        for a in _layer_arrays(layer):
            buf += np.ascontiguousarray(a, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path, dtype=np.float64) -> Tuple[List[Dense], dict]:
    data = Path(path).read_bytes()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(data):
            raise FormatError(f"truncated checkpoint while reading {what}", off)
        chunk = data[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != MODEL_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    specs = []
    for _ in range(count):
        at = off
        tag, n_in, n_out, flags = struct.unpack("<BIIB", take(10, "layer table"))
        if tag != _TAG_DENSE:
            raise FormatError(f"unknown layer tag {tag}", at)
        specs.append((n_in, n_out, flags))
    (blen,) = struct.unpack("<I", take(4, "config length"))
    config = json.loads(take(blen, "config").decode())
    layers = []
    for n_in, n_out, flags in specs:
        layer = Dense(n_in, n_out, relu=bool(flags & 1), batchnorm=bool(flags & 2), dtype=dtype)
        shapes = [(n_out, n_in), (n_out,)] + ([(n_out,)] * 4 if layer.batchnorm else [])
        arrs = [np.frombuffer(take(4 * int(np.prod(s)), "parameters"), dtype="<f4").reshape(s).astype(dtype)
                for s in shapes]
        layer.params["W"], layer.params["b"] = arrs[0], arrs[1]
        if layer.batchnorm:
            layer.params["gamma"], layer.params["beta"] = arrs[2], arrs[3]
            layer.running_mean, layer.running_var = arrs[4], arrs[5]
        layers.append(layer)
    if off != len(data):
        raise FormatError("trailing bytes after checkpoint payload", off)
    return layers, config
