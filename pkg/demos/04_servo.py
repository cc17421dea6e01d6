"""Close the loop: servo the box to held-out goals with a trained DeformerNet.

Pass a checkpoint from ``deformerlab train`` (or demos/03_train.py). Each
goal comes from a fresh episode; the box starts at rest, grasps at the
episode's true MP, and the network commands up to ten clamped moves.

    python demos/04_servo.py path/to/deformer.dfnm [n_goals]
"""

import sys

from deformerlab import dnet, pipeline as pl, servo

model = dnet.DeformerNet.load(sys.argv[1])
cases = pl.holdout_cases(int(sys.argv[2]) if len(sys.argv) > 2 else 3)
cfg = servo.ServoConfig(max_iters=10, absolute_threshold=0.0)
gen = pl.GenConfig.from_dict(cases.meta["gen_config"])

for i in range(len(cases)):
    mesh, goal = pl.case_setup(cases, i, gen)
    _, trace = servo.run_full_pipeline(mesh, goal, cases.mp[i].astype(float), {"deformer": model}, cfg)
    path = " ".join(f"{c * 1000:.1f}" for c in trace.chamfers)
    print(f"goal {i}: chamfer [mm] {path}  ({trace.outcome})")
