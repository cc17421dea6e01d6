"""Point-cloud primitives: farthest point sampling, exact nearest neighbours,
Chamfer distance and a few rigid transforms.

All distances are computed component-wise as ``dx*dx + dy*dy + dz*dz`` rather
than through the ``|p|^2 + |q|^2 - 2 p.q`` expansion, so results are exact to
IEEE rounding and reproducible against a scalar loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import SizeError

_CHUNK = 256


@dataclass(frozen=True)
class PointCloud:
    """Ordered 3D points in meters, optionally tagged with source mesh vertex ids."""

    points: np.ndarray
    source_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise SizeError(f"points must be (n, 3), got {pts.shape}")
        if len(pts) == 0:
            raise SizeError("point cloud must be non-empty")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.source_ids is not None:
            ids = np.asarray(self.source_ids, dtype=np.int64)
            if ids.shape != (len(pts),):
                raise SizeError("source_ids must have one entry per point")
            object.__setattr__(self, "source_ids", ids)

    def __len__(self):
        return len(self.points)

    def translated(self, t) -> "PointCloud":
        return PointCloud(self.points + np.asarray(t, dtype=np.float64), self.source_ids)

    def rotated(self, rotation: np.ndarray, center=None) -> "PointCloud":
        c = np.zeros(3) if center is None else np.asarray(center, dtype=np.float64)
        return PointCloud((self.points - c) @ np.asarray(rotation).T + c, self.source_ids)

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


CloudLike = Union[PointCloud, np.ndarray, Sequence]


def as_points(cloud: CloudLike) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise SizeError(f"points must be (n, 3), got {pts.shape}")
    if len(pts) == 0:
        raise SizeError("point cloud must be non-empty")
    return pts


def _sqdist_to(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    d = points - q
    return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]


def fps(cloud: CloudLike, k: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling.

    Returns ``k`` distinct indices starting with ``seed_index``; each next pick
    maximizes its distance to the already selected set, ties going to the
    lowest index.
    """
    pts = as_points(cloud)
    n = len(pts)
    if not 1 <= k <= n:
        raise SizeError(f"fps needs 1 <= k <= {n}, got k={k}")
    if not 0 <= seed_index < n:
        raise SizeError(f"seed index {seed_index} out of range for {n} points")
    selected = np.empty(k, dtype=np.int64)
    selected[0] = seed_index
    mind = _sqdist_to(pts, pts[seed_index])
    mind[seed_index] = -1.0
    for i in range(1, k):
        nxt = int(np.argmax(mind))
        selected[i] = nxt
        np.minimum(mind, _sqdist_to(pts, pts[nxt]), out=mind)
        mind[selected[: i + 1]] = -1.0
    return selected


def knn(cloud: CloudLike, query, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest points to ``query``, sorted by distance then index."""
    pts = as_points(cloud)
    if not 1 <= k <= len(pts):
        raise SizeError(f"knn needs 1 <= k <= {len(pts)}, got k={k}")
    d2 = _sqdist_to(pts, np.asarray(query, dtype=np.float64))
    return np.argsort(d2, kind="stable")[:k]


def knn_batch(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Row-wise :func:`knn` for many queries at once, shape ``(len(queries), k)``."""
    if not 1 <= k <= len(points):
        raise SizeError(f"knn needs 1 <= k <= {len(points)}, got k={k}")
    out = np.empty((len(queries), k), dtype=np.int64)
    for s in range(0, len(queries), _CHUNK):
        q = queries[s:s + _CHUNK]
        d = points[None, :, :] - q[:, None, :]
        d2 = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]
        if k < len(points):
            part = np.argpartition(d2, k - 1, axis=1)[:, :k]
            dpart = np.take_along_axis(d2, part, axis=1)
            order = np.lexsort((part, dpart), axis=-1)
            res = np.take_along_axis(part, order, axis=1)
            # rows with ties straddling the k-th distance need the exact tie-break
            kth = dpart.max(axis=1, keepdims=True)
            tied = np.flatnonzero((d2 <= kth).sum(axis=1) > k)
            for r in tied:
                res[r] = np.argsort(d2[r], kind="stable")[:k]
            out[s:s + len(q)] = res
        else:
            out[s:s + len(q)] = np.argsort(d2, axis=1, kind="stable")
    return out


def nearest_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """For each point of ``src``, the Euclidean distance to its nearest point in ``dst``."""
    out = np.empty(len(src))
    for s in range(0, len(src), _CHUNK):
        q = src[s:s + _CHUNK]
        d = dst[None, :, :] - q[:, None, :]
        d2 = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]
        out[s:s + len(q)] = np.sqrt(d2.min(axis=1))
    return out


def nearest_indices(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Index into ``dst`` of the nearest point for each row of ``src`` (lowest index on ties)."""
    out = np.empty(len(src), dtype=np.int64)
    for s in range(0, len(src), _CHUNK):
        q = src[s:s + _CHUNK]
        d = dst[None, :, :] - q[:, None, :]
        d2 = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]
        out[s:s + len(q)] = d2.argmin(axis=1)
    return out


def chamfer(a: CloudLike, b: CloudLike) -> float:
    """Symmetric Chamfer distance in meters: sum of both directional mean
    nearest-neighbour distances (unsquared).

    Sums are taken with ``math.fsum`` so the value is independent of point
    order and exactly symmetric.
    """
    pa, pb = as_points(a), as_points(b)
    ab = math.fsum(nearest_distances(pa, pb)) / len(pa)
    ba = math.fsum(nearest_distances(pb, pa)) / len(pb)
    return ab + ba


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Permutation sorting points lexicographically by (x, y, z)."""
    return np.lexsort((points[:, 2], points[:, 1], points[:, 0]))


def rotation_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` by ``angle`` radians."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    K = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def save_xyz(cloud: CloudLike, path) -> None:
    np.savetxt(Path(path), as_points(cloud), fmt="%.9g")


def load_xyz(path) -> PointCloud:
    return PointCloud(np.loadtxt(Path(path), dtype=np.float64, ndmin=2))
