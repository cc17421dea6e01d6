"""Generate a small dataset and train DeformerNet against the descriptor baseline.

Four episodes of 25 single-move samples keep this under a few minutes on one
core. The full 20 x 50 run is what the acceptance suite and the CLI use.

    python demos/03_train.py [epochs] [out_dir]
"""

import sys
from pathlib import Path

from deformerlab import dnet, pipeline as pl

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 20
out = Path(sys.argv[2] if len(sys.argv) > 2 else "demo_out")
out.mkdir(exist_ok=True)

ds = pl.generate_dataset(pl.GenConfig(num_configs=4, shapes_per_config=25))
pl.save_dataset(ds, out / "small.dfns")
print(f"{len(ds)} samples, {len(set(ds.episode))} episodes")

cfg = dnet.TrainConfig(epochs=epochs, batch_size=16, test_fraction=0.25)
learned = dnet.train(ds, cfg)
fixed = dnet.train_baseline_head(ds, cfg)
for name, res in (("DeformerNet", learned), ("baseline", fixed)):
    print(f"{name:>11}: train MSE {res.curve[0].train_mse_mm2:.1f} -> {res.final_train_mse:.1f} mm2, "
          f"test {res.final_test_mse:.1f} mm2 ({res.seconds:.0f} s)")

learned.model.save(out / "deformer_small.dfnm")
dnet.write_curve_csv(learned.curve, out / "deformer_curve.csv")
dnet.write_curve_csv(fixed.curve, out / "baseline_curve.csv")
print(f"checkpoint and curves in {out}/")
