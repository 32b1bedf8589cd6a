"""Single-scene overfit experiment: train on one room and render its
held-out views.  Mirrors the overfit smoke test at adjustable budgets.

Usage: python scripts/run_overfit.py [steps] [workdir]
"""

import sys
import time

from semray.runtime import tune_allocator

tune_allocator()

import numpy as np

from semray.config import RunConfig
from semray.scene import load_dataset, make_dataset
from semray.train import evaluate_scenes, load_model, run_training

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2400
work = sys.argv[2] if len(sys.argv) > 2 else "runs/overfit"

manifest = make_dataset(1, 10, 48, 48, seed=11, out_dir=f"{work}/data",
                        class_count=4, template="room", n_test=0)
dataset = load_dataset(manifest)
cfg = RunConfig(manifest=manifest, out_dir=f"{work}/run",
                channels=16, heads=2, base_channels=8, n_coarse=20, n_fine=12,
                batch_rays=128, steps=steps, dtype="f32", lr_final=1e-4,
                val_interval=500, ckpt_interval=0, seed=3)

t0 = time.time()
result = run_training(cfg, dataset=dataset)
print(f"trained {steps} steps in {(time.time() - t0) / 60:.1f} min, "
      f"final loss {result.final_loss:.4f}")

model, _ = load_model(result.checkpoint_path)
report = evaluate_scenes(model, dataset.train)
print("held-out views of the training scene:", report.summary())
print("per-class IoU:", np.round(report.per_class_iou, 3))
