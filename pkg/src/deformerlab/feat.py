"""Shape-feature extractors.

:class:`Encoder` is a hierarchical set-abstraction network: each level picks
centroids by farthest point sampling, groups the ``k`` nearest neighbours of
each centroid, runs a shared MLP on the neighbour offsets (plus carried
features) and max-pools per group. A final stage runs a shared layer on the
absolute coordinates and features of the last level's centroids, pools over
the whole cloud and emits a 256-d feature through a dense layer.

Centroid selection and grouping depend only on coordinates, so they are
computed once per cloud (:func:`group_cloud`) and reused across epochs.

:func:`fixed_descriptor` is the non-learned baseline: rotation- and
translation-invariant histograms with no trainable parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from . import geom
from .errors import DegenerateGeometryError, SizeError, StateError
from .nn import MLP, Dense

FEATURE_DIM = 256


@dataclass(frozen=True)
class SALevel:
    n_centroids: int
    k: int
    widths: Tuple[int, ...]


@dataclass(frozen=True)
class EncoderParams:
    levels: Tuple[SALevel, ...] = (SALevel(256, 16, (32, 64)), SALevel(64, 16, (64, 128)))
    global_widths: Tuple[int, ...] = (128,)
    out_dim: int = FEATURE_DIM
    coord_scale: float = 10.0

    def __post_init__(self):
        counts = [lv.n_centroids for lv in self.levels]
        if not counts or any(b >= a for a, b in zip(counts, counts[1:])):
            raise ValueError("centroid counts must be strictly decreasing across levels")

    @property
    def min_points(self) -> int:
        return max(self.levels[0].n_centroids, self.levels[0].k)

    def to_dict(self) -> dict:
        return {
            "levels": [[lv.n_centroids, lv.k, list(lv.widths)] for lv in self.levels],
            "global_widths": list(self.global_widths),
            "out_dim": self.out_dim,
            "coord_scale": self.coord_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderParams":
        return cls(
            levels=tuple(SALevel(int(n), int(k), tuple(w)) for n, k, w in d["levels"]),
            global_widths=tuple(d["global_widths"]),
            out_dim=int(d["out_dim"]),
            coord_scale=float(d["coord_scale"]),
        )


@dataclass
class Grouping:
    """Coordinate-only preprocessing of a batch of clouds.

    ``rel[l]`` holds scaled neighbour offsets ``(B, G_l, k_l, 3)``; ``nbr[l]``
    indexes the previous level's centroids (``None`` for level 0); ``xyz`` are
    the last level's centroids in meters, uncentered, ``(B, G_L, 3)``.
    """

    rel: List[np.ndarray]
    nbr: List[Optional[np.ndarray]]
    xyz: np.ndarray

    def __len__(self):
        return len(self.xyz)

    def take(self, idx) -> "Grouping":
        return Grouping([r[idx] for r in self.rel], [None if n is None else n[idx] for n in self.nbr], self.xyz[idx])

    @staticmethod
    def concat(parts: Sequence["Grouping"]) -> "Grouping":
        L = len(parts[0].rel)
        return Grouping(
            [np.concatenate([p.rel[l] for p in parts]) for l in range(L)],
            [None if parts[0].nbr[l] is None else np.concatenate([p.nbr[l] for p in parts]) for l in range(L)],
            np.concatenate([p.xyz for p in parts]),
        )


def group_cloud(cloud: geom.CloudLike, params: EncoderParams, dtype=np.float32) -> Grouping:
    """FPS + kNN grouping of one cloud after canonical (lexicographic) ordering."""
    pts = geom.as_points(cloud)
    if len(pts) < params.min_points:
        raise SizeError(f"encoder needs at least {params.min_points} points, got {len(pts)}")
    pts = pts[geom.canonical_order(pts)]
    rel, nbr = [], []
    prev = pts
    for li, lv in enumerate(params.levels):
        if lv.k > len(prev):
            raise SizeError(f"level {li} neighbourhood k={lv.k} exceeds {len(prev)} available points")
        cidx = geom.fps(prev, lv.n_centroids, 0)
        cent = prev[cidx]
        nb = geom.knn_batch(prev, cent, lv.k)
        rel.append(((prev[nb] - cent[:, None, :]) * params.coord_scale).astype(dtype)[None])
        nbr.append(None if li == 0 else nb[None])
        prev = cent
    return Grouping(rel, nbr, prev[None].astype(np.float64))


def group_clouds(clouds: Sequence[geom.CloudLike], params: EncoderParams, dtype=np.float32) -> Grouping:
    return Grouping.concat([group_cloud(c, params, dtype) for c in clouds])


def _scatter_matrix(nbr: np.ndarray, n_prev: int) -> sp.csr_matrix:
    """Sparse (B*n_prev, B*G*k) matrix summing gathered rows back to their sources."""
    B = nbr.shape[0]
    flat = (nbr + (np.arange(B) * n_prev)[:, None, None]).ravel()
    cols = np.arange(flat.size)
    return sp.csr_matrix((np.ones(flat.size), (flat, cols)), shape=(B * n_prev, flat.size))


class Encoder:
    """Set-abstraction point-cloud encoder with hand-written backward pass."""

    def __init__(self, params: EncoderParams = EncoderParams(), rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = params
        self.level_mlps: List[MLP] = []
        c_prev = 0
        for lv in params.levels:
            self.level_mlps.append(MLP((3 + c_prev,) + tuple(lv.widths), rng=rng, dtype=dtype))
            c_prev = lv.widths[-1]
        self.global_mlp = MLP((3 + c_prev,) + tuple(params.global_widths), rng=rng, dtype=dtype)
        self.out_layer = Dense(params.global_widths[-1], params.out_dim, relu=True, batchnorm=True,
                               rng=rng, dtype=dtype)
        self._cache = None

    @property
    def dtype(self):
        return self.out_layer.dtype

    @property
    def layers(self) -> List[Dense]:
        out = [l for m in self.level_mlps for l in m.layers]
        return out + self.global_mlp.layers + [self.out_layer]

    def astype(self, dtype) -> "Encoder":
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def forward(self, g: Grouping, offsets=None, training: bool = False, batch_stats: bool = True) -> np.ndarray:
        """Encode a grouped batch; ``offsets`` (B, 3) meters are subtracted from
        the absolute coordinates before the global stage (centering)."""
        dt = self.dtype
        B = len(g)
        cache = {"levels": []}
        feat = None
        for li, (lv, mlp) in enumerate(zip(self.params.levels, self.level_mlps)):
            G, k = lv.n_centroids, lv.k
            rel = g.rel[li].reshape(-1, 3).astype(dt, copy=False)
            if feat is None:
                x = rel
                gidx = None
            else:
                gidx = (g.nbr[li] + (np.arange(B) * feat.shape[1])[:, None, None]).ravel()
                x = np.concatenate([rel, feat.reshape(-1, feat.shape[2])[gidx]], axis=1)
            h = mlp.forward(x, training, batch_stats).reshape(B, G, k, -1)
            arg = h.argmax(axis=2)
            feat = np.take_along_axis(h, arg[:, :, None, :], axis=2)[:, :, 0, :]
            cache["levels"].append((arg, h.shape, gidx))
        xyz = g.xyz if offsets is None else g.xyz - np.asarray(offsets, dtype=np.float64)[:, None, :]
        xyz = (xyz * self.params.coord_scale).astype(dt)
        G = xyz.shape[1]
        x = np.concatenate([xyz.reshape(-1, 3), feat.reshape(B * G, -1)], axis=1)
        h = self.global_mlp.forward(x, training, batch_stats).reshape(B, G, -1)
        garg = h.argmax(axis=1)
        pooled = np.take_along_axis(h, garg[:, None, :], axis=1)[:, 0, :]
        psi = self.out_layer.forward(pooled, training, batch_stats)
        if training:
            cache["global"] = (garg, h.shape)
            cache["nbr"] = g.nbr
            self._cache = cache
        return psi

    def backward(self, dpsi: np.ndarray) -> None:
        """Accumulate weight gradients for the last training-mode forward.

        Max-pools route gradient to the winning row only; centroid selection
        and grouping are constants.
        """
        if self._cache is None:
            raise StateError("encoder backward called without a cached training-mode forward")
        cache = self._cache
        dpooled = self.out_layer.backward(dpsi.astype(self.dtype, copy=False))
        garg, hshape = cache["global"]
        B, G, C = hshape
        dh = np.zeros(hshape, dtype=self.dtype)
        np.put_along_axis(dh, garg[:, None, :], dpooled[:, None, :], axis=1)
        dx = self.global_mlp.backward(dh.reshape(B * G, C))
        dfeat = dx[:, 3:].reshape(B, G, -1)
        for li in reversed(range(len(self.level_mlps))):
            arg, shape, gidx = cache["levels"][li]
            dh = np.zeros(shape, dtype=self.dtype)
            np.put_along_axis(dh, arg[:, :, None, :], dfeat[:, :, None, :], axis=2)
            dx = self.level_mlps[li].backward(dh.reshape(-1, shape[3]))
            if li == 0:
                break
            n_prev = self.params.levels[li - 1].n_centroids
            S = _scatter_matrix(cache["nbr"][li], n_prev)
            dfeat = np.asarray(S @ dx[:, 3:], dtype=self.dtype).reshape(B, n_prev, -1)
        self._cache = None

    def grads(self) -> List[np.ndarray]:
        return [layer.grads[name] for layer in self.layers for name in layer.params]

    def param_arrays(self) -> List[np.ndarray]:
        return [layer.params[name] for layer in self.layers for name in layer.params]

    def zero_grad(self):
        for layer in self.layers:
            for name, p in layer.params.items():
                layer.grads[name] = np.zeros_like(p)


def encode(cloud: geom.CloudLike, encoder: Encoder, center: bool = True) -> np.ndarray:
    """Inference-mode 256-d feature of one cloud (centered on its own centroid by default)."""
    pts = geom.as_points(cloud)
    pts = pts[geom.canonical_order(pts)]
    g = group_cloud(pts, encoder.params, dtype=encoder.dtype)
    off = pts.mean(axis=0)[None] if center else None
    return encoder.forward(g, off, training=False)[0]


def encode_backward(encoder: Encoder, upstream: np.ndarray) -> List[np.ndarray]:
    """Weight gradients of ``upstream . psi`` for the cached training forward."""
    encoder.backward(np.atleast_2d(upstream))
    return encoder.grads()


# --- fixed descriptor -------------------------------------------------------

DESC_PAIR_BINS = 120
DESC_RADIAL_BINS = 120
DESC_EIGEN_BINS = 16
DESC_FPS_POINTS = 96


def fixed_descriptor(cloud: geom.CloudLike) -> np.ndarray:
    """Non-learned 256-d shape descriptor invariant to rotation and translation.

    Three blocks, each normalized to unit sum: a histogram of pairwise
    distances among FPS-subsampled points, a histogram of distances to the
    centroid, and a histogram of normalized covariance eigenvalues weighted by
    their own magnitude. Distances are measured in units of the cloud's RMS
    radius.
    """
    pts = geom.as_points(cloud)
    if len(pts) < 8:
        raise SizeError("fixed descriptor needs at least 8 points")
    c = pts.mean(axis=0)
    d = pts - c
    radial = np.sqrt(np.sum(d * d, axis=1))
    rms = float(np.sqrt(np.mean(radial * radial)))
    if not rms > 0:
        raise DegenerateGeometryError("all points coincide")
    # seed FPS at the point farthest from the centroid so the subset is pose-free
    seed = int(np.argmax(radial))
    sub = pts[geom.fps(pts, min(DESC_FPS_POINTS, len(pts)), seed)]
    dd = sub[:, None, :] - sub[None, :, :]
    pair = np.sqrt(np.sum(dd * dd, axis=2))[np.triu_indices(len(sub), 1)] / rms
    h_pair, _ = np.histogram(pair, bins=DESC_PAIR_BINS, range=(0.0, 4.0))
    h_rad, _ = np.histogram(radial / rms, bins=DESC_RADIAL_BINS, range=(0.0, 2.5))
    lam = np.clip(np.linalg.eigvalsh(d.T @ d / len(pts)), 0.0, None)
    lam = lam / lam.sum()
    h_eig, _ = np.histogram(lam, bins=DESC_EIGEN_BINS, range=(0.0, 1.0), weights=lam)
    blocks = []
    for h in (h_pair, h_rad, h_eig):
        h = h.astype(np.float64)
        blocks.append(h / h.sum())
    return np.concatenate(blocks)
