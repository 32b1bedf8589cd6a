"""Losses, the training loop, evaluation and per-scene finetuning.

Each step renders a random ray batch from one training scene (query view
plus m nearby-but-sparse source views), applies the combined semantic and
photometric objective over the coarse and fine passes, and takes one Adam
step on an exponentially decaying learning rate.  Runs are a pure function
of (config, seed): re-running produces hash-identical checkpoints.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, TrainingAborted
from .field import PROB_FLOOR
from .geometry import select_source_views
from .metrics import confusion_matrix, psnr, segmentation_report, ssim
from .optim import adam_step, exponential_lr
from .pipeline import (ModelConfig, RayBatch, SemanticRayModel, ray_rngs_for,
                       rays_for_pixels, render_view)
from .scene import holdout_split, load_dataset


def one_hot(classes, num_classes):
    classes = np.asarray(classes)
    if classes.min() < 0 or classes.max() >= num_classes:
        raise DataError(f"ground-truth class outside [0, {num_classes})")
    out = np.zeros((classes.size, num_classes))
    out[np.arange(classes.size), classes.reshape(-1)] = 1.0
    return out


def cross_entropy(probs, target_one_hot):
    """Mean over the batch of -sum_l p_l log p_hat_l (clamped at 1e-12)."""
    p = ad.clamp_min(probs, PROB_FLOOR)
    ce = ad.sum_(Tensor(target_one_hot.astype(probs.dtype)) * ad.log(p))
    return ce * (-1.0 / target_one_hot.shape[0])


def semantic_loss(coarse_probs, fine_probs, gt_classes, num_classes):
    """Coarse + fine multi-class cross-entropy, averaged over the ray batch."""
    target = one_hot(gt_classes, num_classes)
    return cross_entropy(coarse_probs, target) + cross_entropy(fine_probs, target)


def photometric_loss(pred_rgb, gt_rgb):
    """Mean squared error over rays and channels."""
    diff = pred_rgb - Tensor(np.asarray(gt_rgb, dtype=pred_rgb.dtype))
    return ad.mean(diff * diff)


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    steps: int
    final_loss: float


def model_config_from_run(cfg, num_classes):
    return ModelConfig(
        num_classes=num_classes,
        channels=cfg.channels,
        heads=cfg.heads,
        base_channels=cfg.base_channels,
        num_res_blocks=cfg.num_res_blocks,
        use_position_embedding=cfg.position_embedding,
        tau=cfg.tau,
        variant=cfg.variant,
        n_coarse=cfg.n_coarse,
        n_fine=cfg.n_fine,
        num_source_views=cfg.source_views,
        dtype=cfg.dtype,
    )


def dataset_num_classes(scenes):
    counts = {s.spec.class_count for s in scenes}
    if len(counts) != 1:
        raise DataError(f"scenes disagree on class count: {sorted(counts)}")
    return counts.pop()


def _training_views(scene):
    return holdout_split(scene.n_views)[0]


def sample_step_batch(scene, cfg, rng, step):
    """Choose query view, source views and a pixel batch for one step."""
    train_ids = _training_views(scene)
    query = train_ids[int(rng.integers(len(train_ids)))]
    candidates = [i for i in train_ids if i != query]
    picked = select_source_views([scene.cameras[i] for i in candidates],
                                 scene.cameras[query], cfg.source_views, rng,
                                 (cfg.density_min, cfg.density_max))
    sources = [candidates[i] for i in picked]
    h, w = scene.cameras[query].height, scene.cameras[query].width
    n_px = h * w
    flat = rng.choice(n_px, size=min(cfg.batch_rays, n_px), replace=False)
    pixels = np.stack([flat % w, flat // w], axis=-1).astype(np.float64)
    gt_sem = scene.sem[query].reshape(-1)[flat]
    gt_rgb = scene.rgb[query].reshape(-1, 3)[flat]
    return query, sources, pixels, gt_sem, gt_rgb


def train_step(model, scene, cfg, step):
    """One optimization step; returns the scalar loss components."""
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x57E9, step)))
    query, sources, pixels, gt_sem, gt_rgb = sample_step_batch(scene, cfg, rng, step)
    cam = scene.cameras[query]
    origins, dirs = rays_for_pixels(cam, pixels)
    src_images = np.stack([scene.rgb[i] for i in sources]).astype(model.cfg.np_dtype)
    batch = RayBatch(origins, dirs, scene.spec.t_near, scene.spec.t_far,
                     src_images, [scene.cameras[i] for i in sources])
    ray_ids = step * cfg.batch_rays + np.arange(len(pixels))
    rngs = ray_rngs_for(cfg.seed, ray_ids)

    with Tape() as tape:
        out = model.forward(batch, ray_rngs=rngs, hierarchical=cfg.hierarchical)
        l_sem = semantic_loss(out["coarse"].class_probs, out["fine"].class_probs,
                              gt_sem, model.cfg.num_classes)
        l_photo = (photometric_loss(out["coarse"].color, gt_rgb)
                   + photometric_loss(out["fine"].color, gt_rgb))
        total = l_sem * cfg.lambda_sem + l_photo * cfg.lambda_photo
        values = {"loss": total.item(), "lsem": l_sem.item(), "lphoto": l_photo.item()}
        if not np.isfinite(values["loss"]):
            _dump_bad_batch(cfg, step, scene, query, sources, pixels, values)
            raise TrainingAborted(
                f"non-finite loss at step {step}; diagnostics in {cfg.out_dir}")
        backward(total, tape)
    lr = exponential_lr(step, cfg.steps, cfg.lr_init, cfg.lr_final)
    adam_step(model.params(), lr)
    values["lr"] = lr
    return values


def _dump_bad_batch(cfg, step, scene, query, sources, pixels, values):
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, f"nan_dump_step{step}.json")
    with open(path, "w") as fh:
        json.dump({"step": step, "scene": scene.scene_id, "query_view": query,
                   "source_views": sources, "pixels": pixels.tolist(),
                   "loss_components": values}, fh, indent=2)


def quick_val_miou(model, scene):
    """mIoU of one held-out view of one scene (training-log diagnostic)."""
    train_ids, eval_ids = holdout_split(scene.n_views)
    view = eval_ids[0]
    picked = select_source_views([scene.cameras[i] for i in train_ids],
                                 scene.cameras[view], model.cfg.num_source_views)
    pred, _probs, _rgb = render_view(model, scene, view, [train_ids[i] for i in picked])
    conf = confusion_matrix(scene.sem[view], pred, model.cfg.num_classes)
    return segmentation_report(conf).miou


def run_training(cfg, dataset=None, model=None, scenes=None, log_name="train_log.csv",
                 ckpt_name="checkpoint_final.srk"):
    """Train per ``cfg`` and write the log and checkpoint under cfg.out_dir.

    ``scenes`` restricts training to a subset (finetuning passes one scene);
    ``model`` continues from existing state instead of a fresh init.
    """
    dataset = dataset or load_dataset(cfg.manifest)
    scenes = scenes if scenes is not None else dataset.train
    if not scenes:
        raise ConfigError("no training scenes selected")
    num_classes = dataset_num_classes(scenes)
    if model is None:
        model = SemanticRayModel(model_config_from_run(cfg, num_classes), cfg.seed)
    os.makedirs(cfg.out_dir, exist_ok=True)
    log_path = os.path.join(cfg.out_dir, log_name)
    ckpt_path = os.path.join(cfg.out_dir, ckpt_name)
    values = {"loss": float("nan")}
    with open(log_path, "w") as log:
        log.write("step,loss,lsem,lphoto,lr,miou_val\n")
        for step in range(cfg.steps):
            rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x5C, step)))
            scene = scenes[int(rng.integers(len(scenes)))]
            values = train_step(model, scene, cfg, step)
            miou = ""
            if cfg.val_interval and (step + 1) % cfg.val_interval == 0:
                miou = f"{quick_val_miou(model, scenes[0]):.4f}"
            log.write(f"{step},{values['loss']:.6f},{values['lsem']:.6f},"
                      f"{values['lphoto']:.6f},{values['lr']:.8f},{miou}\n")
            if cfg.ckpt_interval and (step + 1) % cfg.ckpt_interval == 0 \
                    and step + 1 < cfg.steps:
                save_checkpoint(os.path.join(cfg.out_dir, f"checkpoint_{step + 1:06d}.srk"),
                                model.named_params(), step + 1, model.cfg.to_dict())
    save_checkpoint(ckpt_path, model.named_params(), cfg.steps, model.cfg.to_dict())
    return TrainResult(ckpt_path, log_path, cfg.steps, values["loss"])


def load_model(ckpt_path):
    arrays, header = load_checkpoint(ckpt_path)
    model_cfg = ModelConfig(**header["model_config"])
    model = SemanticRayModel(model_cfg, seed=0)
    model.load_state(arrays)
    model.set_step_count(header["step_count"])
    return model, header


def evaluate_scenes(model, scenes):
    """Render every held-out view of every scene from its m nearest sources."""
    num_classes = model.cfg.num_classes
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    psnrs, ssims = [], []
    for scene in scenes:
        train_ids, eval_ids = holdout_split(scene.n_views)
        for view in eval_ids:
            picked = select_source_views([scene.cameras[i] for i in train_ids],
                                         scene.cameras[view], model.cfg.num_source_views)
            sources = [train_ids[i] for i in picked]
            pred, _probs, rgb = render_view(model, scene, view, sources)
            conf += confusion_matrix(scene.sem[view], pred, num_classes)
            psnrs.append(psnr(rgb, scene.rgb[view]))
            ssims.append(ssim(rgb, scene.rgb[view]))
    report = segmentation_report(conf)
    report.psnr = float(np.mean(psnrs))
    report.ssim = float(np.mean(ssims))
    report.psnr_per_image = psnrs
    report.ssim_per_image = ssims
    return report


def finetune(cfg, ckpt_path, scene_id, dataset=None):
    """Continue training a checkpoint on a single scene's training views."""
    dataset = dataset or load_dataset(cfg.manifest)
    model, _header = load_model(ckpt_path)
    scene = dataset.scene(scene_id)
    return run_training(cfg, dataset=dataset, model=model, scenes=[scene],
                        log_name="finetune_log.csv",
                        ckpt_name=f"checkpoint_ft_{scene_id}.srk"), model
