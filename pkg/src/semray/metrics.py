"""Segmentation and reconstruction quality metrics.

Segmentation metrics are derived from an L x L confusion matrix; IoU-style
aggregates average only over classes present in the ground truth.  PSNR uses
peak 1.0 (identical images report a 99 dB sentinel); SSIM runs on Rec.601
luminance with an 11x11 Gaussian window (sigma 1.5, k1=0.01, k2=0.03).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PSNR_CAP = 99.0


def confusion_matrix(gt, pred, num_classes):
    gt = np.asarray(gt).reshape(-1)
    pred = np.asarray(pred).reshape(-1)
    ok = (gt >= 0) & (gt < num_classes)
    return np.bincount(num_classes * gt[ok] + np.clip(pred[ok], 0, num_classes - 1),
                       minlength=num_classes * num_classes).reshape(num_classes, num_classes)


@dataclass
class MetricsReport:
    confusion: np.ndarray
    per_class_iou: np.ndarray
    miou: float
    total_acc: float
    avg_acc: float
    psnr: float = float("nan")
    ssim: float = float("nan")
    psnr_per_image: list = field(default_factory=list)
    ssim_per_image: list = field(default_factory=list)

    def summary(self):
        return (f"mIoU={self.miou:.4f} total_acc={self.total_acc:.4f} "
                f"avg_acc={self.avg_acc:.4f} PSNR={self.psnr:.2f} SSIM={self.ssim:.4f}")


def segmentation_report(confusion):
    """IoU / accuracy aggregates over classes present in the ground truth."""
    confusion = np.asarray(confusion, dtype=np.float64)
    gt_count = confusion.sum(axis=1)
    present = gt_count > 0
    tp = np.diag(confusion)
    union = gt_count + confusion.sum(axis=0) - tp
    iou = np.where(union > 0, tp / np.maximum(union, 1e-12), 0.0)
    total = confusion.sum()
    recall = tp[present] / gt_count[present]
    return MetricsReport(
        confusion=confusion.astype(np.int64),
        per_class_iou=iou,
        miou=float(iou[present].mean()) if present.any() else 0.0,
        total_acc=float(tp.sum() / total) if total > 0 else 0.0,
        avg_acc=float(recall.mean()) if present.any() else 0.0,
    )


def psnr(pred, gt, peak=1.0):
    mse = float(np.mean((np.asarray(pred) - np.asarray(gt)) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(peak * peak / mse), PSNR_CAP)


def _gaussian_kernel(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def _filter2_valid(img, kernel):
    """Separable 'valid' correlation with a 1-d kernel applied on both axes."""
    size = len(kernel)
    win = np.lib.stride_tricks.sliding_window_view(img, size, axis=0)
    img = np.tensordot(win, kernel, axes=([-1], [0]))
    win = np.lib.stride_tricks.sliding_window_view(img, size, axis=1)
    return np.tensordot(win, kernel, axes=([-1], [0]))


def luminance(rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb @ np.array([0.299, 0.587, 0.114])


def ssim(pred, gt, k1=0.01, k2=0.03, peak=1.0, window=11, sigma_w=1.5):
    """Mean SSIM between two RGB (or grayscale) images on luminance."""
    x = luminance(pred) if np.asarray(pred).ndim == 3 else np.asarray(pred, dtype=np.float64)
    y = luminance(gt) if np.asarray(gt).ndim == 3 else np.asarray(gt, dtype=np.float64)
    if min(x.shape) < window:
        raise ValueError(f"image {x.shape} smaller than the {window}x{window} SSIM window")
    kern = _gaussian_kernel(window, sigma_w)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    mx, my = _filter2_valid(x, kern), _filter2_valid(y, kern)
    mxx, myy = _filter2_valid(x * x, kern), _filter2_valid(y * y, kern)
    mxy = _filter2_valid(x * y, kern)
    vx, vy = mxx - mx * mx, myy - my * my
    cxy = mxy - mx * my
    score = ((2 * mx * my + c1) * (2 * cxy + c2)
             / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(score.mean())
