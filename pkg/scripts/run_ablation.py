"""Attention-variant ablation: train full / intra-only / cross-only / none
under identical seed and budget, evaluate zero-shot on held-out scenes.

Usage: python scripts/run_ablation.py [steps] [workdir]
"""

import sys
import time

from semray.runtime import tune_allocator

tune_allocator()

from semray.config import RunConfig
from semray.scene import load_dataset, make_dataset
from semray.train import evaluate_scenes, load_model, run_training

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1100
work = sys.argv[2] if len(sys.argv) > 2 else "runs/ablation"

manifest = make_dataset(12, 8, 48, 48, seed=20, out_dir=f"{work}/data",
                        class_count=4, template="room", n_test=4)
dataset = load_dataset(manifest)

results = {}
for variant in ("full", "intra_only", "cross_only", "none"):
    cfg = RunConfig(manifest=manifest, out_dir=f"{work}/{variant}",
                    channels=16, heads=2, base_channels=8, n_coarse=20, n_fine=12,
                    batch_rays=128, steps=steps, dtype="f32", lr_final=2e-4,
                    val_interval=0, ckpt_interval=0, seed=13, variant=variant)
    t0 = time.time()
    out = run_training(cfg, dataset=dataset)
    model, _ = load_model(out.checkpoint_path)
    rep = evaluate_scenes(model, dataset.test)
    results[variant] = rep
    print(f"{variant:<12} mIoU {rep.miou:.4f} total_acc {rep.total_acc:.4f} "
          f"({(time.time() - t0) / 60:.1f} min)")

order = sorted(results, key=lambda k: -results[k].miou)
print("ordering:", " > ".join(order))
