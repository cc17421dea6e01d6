"""DeformerNet: shared point-cloud encoder on current and goal clouds, feature
difference, dense head to a 3-vector.

Two output variants share the architecture:

* ``"deformer"`` predicts the gripper displacement ``dp`` (meters);
* ``"mp"`` predicts the absolute manipulation point in the observation frame.

:class:`BaselineNet` puts the same head on top of the fixed descriptor.
Training reports losses in mm^2; internally the head regresses targets
divided by ``output_scale`` so that they are O(1).
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import geom
from .dataset import Dataset
from .errors import DivergenceError, ParameterError, SizeError
from .feat import FEATURE_DIM, EncoderParams, Encoder, Grouping, SALevel, fixed_descriptor, group_cloud
from .nn import MLP, AdamState, LrSchedule, adam_step, load_checkpoint, lr_at, mse_grad, save_checkpoint

log = logging.getLogger(__name__)

HEAD_WIDTHS = (128, 64, 32)
M_TO_MM2 = 1e6

# Compact encoder used for desk-scale training on a single CPU core.
DESK_ENCODER = EncoderParams(
    levels=(SALevel(128, 16, (16, 32)), SALevel(32, 8, (32, 64))),
    global_widths=(64,),
)

OUTPUT_SCALE = {"deformer": 0.02, "mp": 0.05}


def _centroids(clouds: np.ndarray) -> np.ndarray:
    """Per-cloud centroid of the canonically ordered points (order-independent)."""
    out = np.empty((len(clouds), 3))
    for i, c in enumerate(clouds):
        p = np.asarray(c, dtype=np.float64)
        out[i] = p[geom.canonical_order(p)].mean(axis=0)
    return out


class DeformerNet:
    def __init__(self, encoder_params: EncoderParams = DESK_ENCODER, variant: str = "deformer",
                 head_widths: Sequence[int] = HEAD_WIDTHS, seed: int = 0, dtype=np.float32,
                 center: bool = True, output_scale: Optional[float] = None):
        if variant not in OUTPUT_SCALE:
            raise ParameterError(f"unknown variant {variant!r}")
        if encoder_params.out_dim != FEATURE_DIM:
            raise ParameterError("encoder must emit 256 features")
        rng = np.random.default_rng(seed)
        self.variant = variant
        self.center = center
        self.output_scale = OUTPUT_SCALE[variant] if output_scale is None else output_scale
        self.head_widths = tuple(head_widths)
        self.encoder = Encoder(encoder_params, rng=rng, dtype=dtype)
        self.head = MLP((FEATURE_DIM,) + self.head_widths + (3,), rng=rng, dtype=dtype, linear_output=True)

    @property
    def layers(self):
        return self.encoder.layers + self.head.layers

    @property
    def dtype(self):
        return self.encoder.dtype

    def astype(self, dtype) -> "DeformerNet":
        for layer in self.layers:
            layer.astype(dtype)
        return self

    # -- preprocessing ------------------------------------------------------
    def prepare(self, current: np.ndarray, goal: np.ndarray):
        """Group every cloud once; returns an object indexable by sample."""
        p = self.encoder.params
        gc = [group_cloud(c, p, dtype=self.dtype) for c in current]
        gg = [group_cloud(c, p, dtype=self.dtype) for c in goal]
        off = _centroids(current) if self.center else np.zeros((len(current), 3))
        return _Prepared(Grouping.concat(gc), Grouping.concat(gg), off)

    # -- forward / backward -------------------------------------------------
    def forward_raw(self, prep: "_Prepared", training: bool = False) -> np.ndarray:
        B = len(prep.off)
        # a single-sample batch trains with frozen batch-norm statistics
        bs = B > 1
        g = Grouping.concat([prep.cur, prep.goal])
        psi = self.encoder.forward(g, np.concatenate([prep.off, prep.off]), training, bs)
        dpsi = psi[B:] - psi[:B]
        return self.head.forward(dpsi, training, bs)

    def backward_raw(self, draw: np.ndarray) -> None:
        d = self.head.backward(draw.astype(self.dtype, copy=False))
        self.encoder.backward(np.concatenate([-d, d]))

    def to_output(self, raw: np.ndarray, off: np.ndarray) -> np.ndarray:
        out = raw.astype(np.float64) * self.output_scale
        if self.variant == "mp":
            out = out + off
        return out

    def target_raw(self, target: np.ndarray, off: np.ndarray) -> np.ndarray:
        t = np.asarray(target, dtype=np.float64)
        if self.variant == "mp":
            t = t - off
        return (t / self.output_scale).astype(self.dtype)

    def predict_batch(self, prep: "_Prepared") -> np.ndarray:
        return self.to_output(self.forward_raw(prep, training=False), prep.off)

    def predict(self, current: geom.CloudLike, goal: geom.CloudLike) -> np.ndarray:
        prep = self.prepare([geom.as_points(current)], [geom.as_points(goal)])
        return self.predict_batch(prep)[0]

    def parameters(self) -> List[np.ndarray]:
        return [l.params[n] for l in self.layers for n in l.params]

    def gradients(self) -> List[np.ndarray]:
        return [l.grads[n] for l in self.layers for n in l.params]

    # -- persistence ----------------------------------------------------------
    def config(self) -> dict:
        return {"kind": "deformernet", "variant": self.variant, "center": self.center,
                "output_scale": self.output_scale, "head_widths": list(self.head_widths),
                "encoder": self.encoder.params.to_dict()}

    def save(self, path) -> None:
        save_checkpoint(path, self.layers, self.config())

    @classmethod
    def load(cls, path, dtype=np.float32) -> "DeformerNet":
        layers, cfg = load_checkpoint(path, dtype=dtype)
        if cfg.get("kind") != "deformernet":
            raise ParameterError(f"checkpoint holds {cfg.get('kind')!r}, not a deformernet")
        model = cls(EncoderParams.from_dict(cfg["encoder"]), cfg["variant"], cfg["head_widths"], dtype=dtype,
                    center=cfg["center"], output_scale=cfg["output_scale"])
        _assign(model.layers, layers)
        return model


class BaselineNet:
    """Dense head on the difference of fixed descriptors; nothing upstream is trainable."""

    def __init__(self, head_widths: Sequence[int] = HEAD_WIDTHS, seed: int = 0, dtype=np.float32,
                 output_scale: Optional[float] = None):
        rng = np.random.default_rng(seed)
        self.variant = "deformer"
        self.output_scale = OUTPUT_SCALE["deformer"] if output_scale is None else output_scale
        self.head_widths = tuple(head_widths)
        self.head = MLP((FEATURE_DIM,) + self.head_widths + (3,), rng=rng, dtype=dtype, linear_output=True)

    @property
    def layers(self):
        return self.head.layers

    @property
    def dtype(self):
        return self.head.layers[0].dtype

    def prepare(self, current, goal):
        dc = np.stack([fixed_descriptor(c) for c in current])
        dg = np.stack([fixed_descriptor(c) for c in goal])
        return _PreparedDesc((dg - dc).astype(self.dtype), np.zeros((len(current), 3)))

    def forward_raw(self, prep, training=False):
        return self.head.forward(prep.dpsi, training, len(prep.dpsi) > 1)

    def backward_raw(self, draw):
        self.head.backward(draw.astype(self.dtype, copy=False))

    def to_output(self, raw, off):
        return raw.astype(np.float64) * self.output_scale

    def target_raw(self, target, off):
        return (np.asarray(target, dtype=np.float64) / self.output_scale).astype(self.dtype)

    def predict_batch(self, prep):
        return self.to_output(self.forward_raw(prep, False), prep.off)

    def predict(self, current, goal):
        return self.predict_batch(self.prepare([geom.as_points(current)], [geom.as_points(goal)]))[0]

    def parameters(self):
        return [l.params[n] for l in self.layers for n in l.params]

    def gradients(self):
        return [l.grads[n] for l in self.layers for n in l.params]

    def config(self) -> dict:
        return {"kind": "baseline", "output_scale": self.output_scale, "head_widths": list(self.head_widths)}

    def save(self, path) -> None:
        save_checkpoint(path, self.layers, self.config())

    @classmethod
    def load(cls, path, dtype=np.float32) -> "BaselineNet":
        layers, cfg = load_checkpoint(path, dtype=dtype)
        model = cls(cfg["head_widths"], dtype=dtype, output_scale=cfg["output_scale"])
        _assign(model.layers, layers)
        return model


def _assign(dst, src):
    if len(dst) != len(src):
        raise ParameterError("checkpoint layer count does not match the architecture")
    for a, b in zip(dst, src):
        if (a.n_in, a.n_out, a.relu, a.batchnorm) != (b.n_in, b.n_out, b.relu, b.batchnorm):
            raise ParameterError("checkpoint layer table does not match the architecture")
        a.params = b.params
        if a.batchnorm:
            a.running_mean, a.running_var = b.running_mean, b.running_var


@dataclass
class _Prepared:
    cur: Grouping
    goal: Grouping
    off: np.ndarray

    def take(self, idx):
        return _Prepared(self.cur.take(idx), self.goal.take(idx), self.off[idx])


@dataclass
class _PreparedDesc:
    dpsi: np.ndarray
    off: np.ndarray

    def take(self, idx):
        return _PreparedDesc(self.dpsi[idx], self.off[idx])


def forward(model: DeformerNet, current: geom.CloudLike, goal: geom.CloudLike) -> np.ndarray:
    """Commanded gripper displacement (meters) that should turn ``current`` into ``goal``."""
    return model.predict(current, goal)


def forward_mp(model: DeformerNet, initial: geom.CloudLike, goal: geom.CloudLike) -> np.ndarray:
    """Manipulation point (meters, observation frame) predicted by an ``"mp"`` model."""
    if model.variant != "mp":
        raise ParameterError("forward_mp needs a model trained with variant='mp'")
    return model.predict(initial, goal)


# --- training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    schedule: LrSchedule = field(default_factory=LrSchedule)
    seed: int = 0
    variant: str = "deformer"
    encoder: EncoderParams = DESK_ENCODER
    test_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2:
            raise ParameterError("epochs must be >= 1 and batch_size >= 2")


@dataclass
class CurveRow:
    epoch: int
    lr: float
    train_mse_mm2: float
    test_mse_mm2: float


@dataclass
class TrainResult:
    model: object
    curve: List[CurveRow]
    train_idx: np.ndarray
    test_idx: np.ndarray
    seconds: float = 0.0

    @property
    def final_train_mse(self) -> float:
        return self.curve[-1].train_mse_mm2

    @property
    def final_test_mse(self) -> float:
        return self.curve[-1].test_mse_mm2


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Shuffled minibatches; a trailing single sample joins the previous batch.

    Only a one-sample dataset yields a batch of one, which trains with frozen
    batch-norm statistics.
    """
    if n == 1:
        return [np.array([0])]
    perm = rng.permutation(n)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


def _targets(ds: Dataset, variant: str) -> np.ndarray:
    return np.asarray(ds.mp if variant == "mp" else ds.delta_p, dtype=np.float64)


def evaluate_mse(model, prep, target: np.ndarray, batch_size: int = 128) -> float:
    """Inference-mode MSE in mm^2 (meter-valued outputs)."""
    if len(target) == 0:
        return float("nan")
    preds = [model.predict_batch(prep.take(np.arange(s, min(s + batch_size, len(target)))))
             for s in range(0, len(target), batch_size)]
    d = np.concatenate(preds) - target
    return float(np.mean(d * d)) * M_TO_MM2


def _fit(model, prep, targets, train_idx, test_idx, config: TrainConfig) -> TrainResult:
    t0 = time.time()
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    state = AdamState.zeros_like(params)
    mm2 = (model.output_scale * 1000.0) ** 2
    tr_prep, te_prep = prep.take(train_idx), prep.take(test_idx)
    tr_t, te_t = targets[train_idx], targets[test_idx]
    raw_t = model.target_raw(tr_t, tr_prep.off)
    curve = [CurveRow(0, lr_at(config.schedule, 0), evaluate_mse(model, tr_prep, tr_t),
                      evaluate_mse(model, te_prep, te_t))]
    for epoch in range(config.epochs):
        lr = lr_at(config.schedule, epoch)
        losses, weights = [], []
        for b in minibatches(len(train_idx), config.batch_size, rng):
            raw = model.forward_raw(tr_prep.take(b), training=True)
            d = raw - raw_t[b]
            loss = float(np.mean(d.astype(np.float64) ** 2))
            if not np.isfinite(loss):
                raise DivergenceError(epoch)
            model.backward_raw(mse_grad(raw, raw_t[b]))
            adam_step(params, model.gradients(), state, lr)
            losses.append(loss)
            weights.append(len(b))
        train_mse = float(np.average(losses, weights=weights)) * mm2
        test_mse = evaluate_mse(model, te_prep, te_t)
        curve.append(CurveRow(epoch + 1, lr, train_mse, test_mse))
        log.info("epoch %d lr %.1e train %.3f mm2 test %.3f mm2", epoch + 1, lr, train_mse, test_mse)
    return TrainResult(model, curve, train_idx, test_idx, time.time() - t0)


def _split(dataset: Dataset, config: TrainConfig):
    if len(dataset) == 0:
        raise SizeError("cannot train on an empty dataset")
    return dataset.episode_split(config.test_fraction, config.seed)


def train(dataset: Dataset, config: TrainConfig = TrainConfig(), prep=None) -> TrainResult:
    """Train DeformerNet (or its MP-regression variant) end to end with Adam.

    Curve row 0 evaluates the untrained model; row ``e`` reports the mean
    minibatch loss of epoch ``e`` and the inference-mode test MSE after it.
    """
    train_idx, test_idx = _split(dataset, config)
    model = DeformerNet(config.encoder, config.variant, seed=config.seed)
    if prep is None:
        prep = model.prepare(dataset.current, dataset.goal)
    return _fit(model, prep, _targets(dataset, config.variant), train_idx, test_idx, config)


def train_baseline_head(dataset: Dataset, config: TrainConfig = TrainConfig(), prep=None) -> TrainResult:
    """Same head and recipe, fed with fixed-descriptor differences."""
    if config.variant != "deformer":
        raise ParameterError("the baseline only supports the displacement variant")
    train_idx, test_idx = _split(dataset, config)
    model = BaselineNet(seed=config.seed)
    if prep is None:
        prep = model.prepare(dataset.current, dataset.goal)
    return _fit(model, prep, _targets(dataset, "deformer"), train_idx, test_idx, config)


def write_curve_csv(curve: Sequence[CurveRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_mse_mm2", "test_mse_mm2"])
        for r in curve:
            w.writerow([r.epoch, f"{r.lr:.6g}", f"{r.train_mse_mm2:.6g}", f"{r.test_mse_mm2:.6g}"])
