"""Cross-scene generalization experiment: train on several rooms, render
unseen ones zero-shot, then finetune on one test scene.

Usage: python scripts/run_generalization.py [steps] [workdir]
"""

import sys
import time

from semray.runtime import tune_allocator

tune_allocator()

import numpy as np

from semray.config import RunConfig
from semray.scene import load_dataset, make_dataset
from semray.train import evaluate_scenes, finetune, load_model, run_training

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2600
work = sys.argv[2] if len(sys.argv) > 2 else "runs/generalization"

manifest = make_dataset(12, 8, 48, 48, seed=20, out_dir=f"{work}/data",
                        class_count=4, template="room", n_test=4)
dataset = load_dataset(manifest)
base = dict(manifest=manifest, channels=16, heads=2, base_channels=8,
            n_coarse=20, n_fine=12, batch_rays=128, dtype="f32",
            lr_final=2e-4, val_interval=500, ckpt_interval=0)
cfg = RunConfig(out_dir=f"{work}/run", steps=steps, seed=5, **base)

t0 = time.time()
result = run_training(cfg, dataset=dataset)
print(f"trained {steps} steps on {len(dataset.train)} scenes in "
      f"{(time.time() - t0) / 60:.1f} min")

model, _ = load_model(result.checkpoint_path)
report = evaluate_scenes(model, dataset.test)
print(f"zero-shot on {len(dataset.test)} unseen scenes:", report.summary())
print("per-class IoU:", np.round(report.per_class_iou, 3))

scene = dataset.test[0]
ft_cfg = RunConfig(out_dir=f"{work}/ft", steps=500, seed=6,
                   **{**base, "lr_init": 1e-4, "lr_final": 5e-5})
_ft_result, ft_model = finetune(ft_cfg, result.checkpoint_path, scene.scene_id,
                                dataset=dataset)
before = evaluate_scenes(model, [scene]).miou
after = evaluate_scenes(ft_model, [scene]).miou
print(f"finetune 500 steps on {scene.scene_id}: mIoU {before:.4f} -> {after:.4f}")
