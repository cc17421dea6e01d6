"""In-memory training dataset shared by the model and pipeline modules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class Dataset:
    """Stacked training samples, all in meters.

    ``current``/``goal`` are ``(N, n_points, 3)`` float32 clouds, ``delta_p``
    the applied gripper displacement and ``mp`` the grasp center (rest frame).
    ``episode`` tags each sample with its episode; ``pre_offset`` is the
    grasp offset of the pre-move state and is only needed to replay samples.
    """

    current: np.ndarray
    goal: np.ndarray
    delta_p: np.ndarray
    mp: np.ndarray
    episode: Optional[np.ndarray] = None
    pre_offset: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.episode is None:
            self.episode = infer_episodes(self.mp)

    def __len__(self):
        return len(self.delta_p)

    @property
    def cloud_size(self) -> int:
        return self.current.shape[1] if self.current.ndim == 3 else 0

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.current[idx], self.goal[idx], self.delta_p[idx], self.mp[idx], self.episode[idx],
                       None if self.pre_offset is None else self.pre_offset[idx], dict(self.meta))

    def episode_split(self, test_fraction: float = 0.1, seed: int = 0):
        """Train/test sample indices split by whole episodes."""
        eps = np.unique(self.episode)
        n_test = int(round(test_fraction * len(eps))) if len(eps) > 1 else 0
        rng = np.random.default_rng(seed)
        test_eps = rng.permutation(eps)[:n_test]
        test = np.isin(self.episode, test_eps)
        return np.flatnonzero(~test), np.flatnonzero(test)


def infer_episodes(mp: np.ndarray) -> np.ndarray:
    """Samples sharing a grasp center belong to one episode."""
    if len(mp) == 0:
        return np.zeros(0, dtype=np.int64)
    _, first, inv = np.unique(np.asarray(mp), axis=0, return_index=True, return_inverse=True)
    # renumber by first appearance so ids follow file order
    order = np.argsort(np.argsort(first))
    return order[np.asarray(inv).ravel()].astype(np.int64)
