"""Closed-loop shape servoing on the simulator.

Each iteration observes the surface cloud at equilibrium, asks DeformerNet
for a gripper displacement towards the goal, clamps it to ``max_step``,
moves the grasp and re-solves.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Union

import numpy as np

from . import geom, mp as mpsel, softsim
from .dnet import forward
from .errors import ConvergenceError, GraspConflictError, GraspMissError, InvalidMPError, ParameterError

SUCCESS, MAX_ITERS, SOLVER_FAILURE = "success", "max-iters", "solver-failure"


@dataclass(frozen=True)
class ServoConfig:
    max_iters: int = 15
    relative_threshold: float = 0.05
    absolute_threshold: float = 0.005  # meters
    max_step: float = softsim.DEFAULT_MAX_STEP
    cloud_size: int = softsim.DEFAULT_CLOUD_SIZE
    seed: int = 0
    grasp_radius: float = 0.03
    solver_tol: float = softsim.DEFAULT_TOL

    def __post_init__(self):
        if self.max_iters < 1:
            raise ParameterError("max_iters must be >= 1")
        if self.relative_threshold < 0 or self.absolute_threshold < 0 \
                or max(self.relative_threshold, self.absolute_threshold) <= 0:
            raise ParameterError("the success threshold must be positive")
        if not self.max_step > 0:
            raise ParameterError("max_step must be positive")

    def threshold(self, initial_chamfer: float) -> float:
        return max(self.relative_threshold * initial_chamfer, self.absolute_threshold)


@dataclass
class ServoRecord:
    iteration: int
    chamfer: float
    dp: np.ndarray  # applied displacement; zero on the closing observation
    clamped: bool


@dataclass
class ServoTrace:
    records: List[ServoRecord] = field(default_factory=list)
    outcome: str = MAX_ITERS
    threshold: float = 0.0

    @property
    def chamfers(self) -> np.ndarray:
        return np.array([r.chamfer for r in self.records])

    @property
    def initial_chamfer(self) -> float:
        return self.records[0].chamfer

    @property
    def final_chamfer(self) -> float:
        return self.records[-1].chamfer

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "chamfer_m", "dx", "dy", "dz", "clamped"])
            for r in self.records:
                w.writerow([r.iteration, f"{r.chamfer:.9g}", *(f"{v:.9g}" for v in r.dp), int(r.clamped)])


def run_servo(mesh: softsim.SpringMesh, handle: softsim.GraspHandle, goal: geom.CloudLike, model,
              config: ServoConfig = ServoConfig()) -> ServoTrace:
    """Drive ``mesh`` towards ``goal``; iteration 0 records the initial observation."""
    goal_pts = geom.as_points(goal)
    trace = ServoTrace()
    for it in range(config.max_iters + 1):
        cur = softsim.surface_cloud(mesh, config.cloud_size, config.seed)
        ch = geom.chamfer(cur, goal_pts)
        if it == 0:
            trace.threshold = config.threshold(ch)
        if ch <= trace.threshold:
            trace.records.append(ServoRecord(it, ch, np.zeros(3), False))
            trace.outcome = SUCCESS
            break
        if it == config.max_iters:
            trace.records.append(ServoRecord(it, ch, np.zeros(3), False))
            trace.outcome = MAX_ITERS
            break
        dp = forward(model, cur, goal_pts)
        move = softsim.move_grasp(mesh, handle, dp, config.max_step)
        trace.records.append(ServoRecord(it, ch, move.applied, move.clamped))
        try:
            softsim.solve_equilibrium(mesh, tol=config.solver_tol)
        except ConvergenceError:
            trace.outcome = SOLVER_FAILURE
            break
    return trace


MPMethod = Union[str, np.ndarray]


def run_full_pipeline(mesh: softsim.SpringMesh, goal: geom.PointCloud, mp_method: MPMethod,
                      models: Mapping[str, object], config: ServoConfig = ServoConfig(),
                      m: int = mpsel.DEFAULT_M):
    """Select an MP, grasp there and servo to ``goal``.

    ``mesh`` is the clamped, ungrasped initial configuration (modified in
    place). ``mp_method`` is ``"heuristic"``, ``"regression"`` or an explicit
    point (ground truth, adversarial). ``models`` maps ``"deformer"`` and
    optionally ``"mp"`` to trained networks. Returns ``(mp, trace)``.
    """
    if isinstance(mp_method, str):
        initial = softsim.surface_cloud(mesh, config.cloud_size, config.seed)
        point = mpsel.select_mp(mp_method, initial, goal, model=models.get("mp"), mesh=mesh, m=m)
    else:
        point = np.asarray(mp_method, dtype=np.float64)
    try:
        handle = softsim.grasp(mesh, point, config.grasp_radius)
    except (GraspMissError, GraspConflictError) as e:
        raise InvalidMPError(point) from e
    return point, run_servo(mesh, handle, goal, models["deformer"], config)
