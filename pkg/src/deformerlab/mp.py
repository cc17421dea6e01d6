"""Manipulation-point selection.

The heuristic picks keypoints on the initial cloud, pairs each one with its
counterpart on the goal cloud and returns the displacement-weighted mean of
the ``M`` keypoints that move the most. The regression variant delegates to a
DeformerNet trained with ``variant="mp"``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
import numpy as np

from . import geom
from .dnet import forward_mp
from .errors import CorrespondenceError, ModelMissingError, NoDeformationError, ParameterError, SizeError
from .softsim import closest_surface_point

DEFAULT_K = 200
DEFAULT_M = 5


@dataclass(frozen=True)
class KeypointSet:
    u_init: np.ndarray  # (K, 3)
    u_goal: np.ndarray  # (K, 3)

    def __post_init__(self):
        if self.u_init.shape != self.u_goal.shape or self.u_init.ndim != 2 or len(self.u_init) < 1:
            raise SizeError("keypoint pairs must be two matching (K, 3) arrays with K >= 1")

    @property
    def delta(self) -> np.ndarray:
        return np.linalg.norm(self.u_goal - self.u_init, axis=1)

    def __len__(self):
        return len(self.u_init)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "xi", "yi", "zi", "xg", "yg", "zg", "delta"])
            for k, (a, b, d) in enumerate(zip(self.u_init, self.u_goal, self.delta)):
                w.writerow([k, *(f"{v:.9g}" for v in a), *(f"{v:.9g}" for v in b), f"{d:.9g}"])


def _match(initial: geom.PointCloud, goal: geom.PointCloud, sel: np.ndarray) -> np.ndarray:
    """Goal index for each selected initial point."""
    ids_i, ids_g = initial.source_ids, goal.source_ids
    if len(initial) == len(goal) and np.array_equal(ids_i, ids_g):
        # same sampling plan: index i is the same material point in both clouds
        return sel
    pi, pg = initial.points, goal.points
    out = np.empty(len(sel), dtype=np.int64)
    order = np.argsort(ids_g, kind="stable")
    sorted_ids = ids_g[order]
    for n, i in enumerate(sel):
        lo, hi = np.searchsorted(sorted_ids, [ids_i[i], ids_i[i] + 1])
        cand = order[lo:hi] if hi > lo else np.arange(len(pg))
        cand = np.sort(cand)
        out[n] = cand[np.argmin(np.sum((pg[cand] - pi[i]) ** 2, axis=1))]
    return out


def detect_keypoints(initial: geom.PointCloud, goal: geom.PointCloud, k: int = DEFAULT_K) -> KeypointSet:
    """FPS keypoints on ``initial`` (seed index 0) paired with goal points.

    Pairs use the simulator's source vertex ids: the same sample index when
    both clouds come from one sampling plan, otherwise the nearest goal point
    with the same source vertex, otherwise the nearest goal point.
    """
    if not isinstance(initial, geom.PointCloud) or not isinstance(goal, geom.PointCloud) \
            or initial.source_ids is None or goal.source_ids is None:
        raise CorrespondenceError("keypoint correspondence needs clouds with source_ids")
    if not 1 <= k <= len(initial):
        raise SizeError(f"need 1 <= K <= {len(initial)}, got {k}")
    sel = geom.fps(initial, k, 0)
    return KeypointSet(initial.points[sel], goal.points[_match(initial, goal, sel)])


def select_mp_heuristic(keypoints: KeypointSet, m: int = DEFAULT_M) -> np.ndarray:
    """Displacement-weighted mean of the ``m`` most displaced initial keypoints."""
    if not 1 <= m <= len(keypoints):
        raise ParameterError(f"need 1 <= M <= {len(keypoints)}, got {m}")
    d = keypoints.delta
    top = np.lexsort((np.arange(len(d)), -d))[:m]
    w = d[top]
    if not np.sum(w) > 0:
        raise NoDeformationError("the top keypoints do not move")
    return (w[:, None] * keypoints.u_init[top]).sum(axis=0) / np.sum(w)


def select_mp(method: str, initial: geom.PointCloud, goal: geom.PointCloud, *, model=None, mesh=None,
              k: int = DEFAULT_K, m: int = DEFAULT_M) -> np.ndarray:
    """Manipulation point by ``"heuristic"`` or ``"regression"``.

    With a ``mesh`` the result is projected onto its current surface so that it
    can be grasped.
    """
    if method == "heuristic":
        p = select_mp_heuristic(detect_keypoints(initial, goal, k), m)
    elif method == "regression":
        if model is None:
            raise ModelMissingError("regression MP selection needs a trained mp model")
        p = forward_mp(model, initial, goal)
    else:
        raise ParameterError(f"unknown MP method {method!r}")
    if mesh is not None:
        p = closest_surface_point(mesh, p)
    return np.asarray(p, dtype=np.float64)


def mp_error(predicted, truth) -> float:
    return float(np.linalg.norm(np.asarray(predicted, dtype=np.float64) - np.asarray(truth, dtype=np.float64)))

