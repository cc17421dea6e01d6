"""Where should the gripper grab? Keypoint heuristic versus a bad choice.

The goal shape lifts the free end of the box. The heuristic picks the
keypoints that move most between the initial and goal clouds and proposes
their weighted mean. Grasping close to the clamp instead (the adversarial
point) cannot produce the goal: a scripted controller pulling towards the
tip target gets nowhere.

    python demos/02_mp_selection.py
"""

import numpy as np

from deformerlab import geom, mp, pipeline as pl, softsim as ss

cfg = pl.GenConfig()
tip = np.array([0.2, 0.05, 0.05])

bent = pl.make_clamped_box(cfg)
h = ss.grasp(bent, tip, cfg.grasp_radius)
pl.move_and_solve(bent, h, [0.0, 0.0, 0.04], cfg.max_step)
goal = ss.surface_cloud(bent)

rest = pl.make_clamped_box(cfg)
initial = ss.surface_cloud(rest)
kp = mp.detect_keypoints(initial, goal)
print(f"{len(kp)} keypoints, largest displacement {kp.delta.max():.4f} m")
for m in (1, 5, 20):
    p = mp.select_mp("heuristic", initial, goal, mesh=rest, m=m)
    print(f"M={m:>2}: MP {np.round(p, 4)}, {np.linalg.norm(p - tip):.4f} m from the true grasp")

for name, point in (("heuristic", mp.select_mp("heuristic", initial, goal, mesh=rest)),
                    ("adversarial", pl.adversarial_mp(cfg))):
    box = pl.make_clamped_box(cfg)
    g = ss.grasp(box, point, cfg.grasp_radius)
    pl.move_and_solve(box, g, [0.0, 0.0, 0.04], cfg.max_step)
    print(f"{name:>11} grasp lifted 4 cm: chamfer to goal {geom.chamfer(ss.surface_cloud(box), goal):.4f} m")
