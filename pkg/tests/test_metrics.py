import numpy as np
import pytest

from semray.metrics import (PSNR_CAP, confusion_matrix, psnr,
                            segmentation_report, ssim)

rng = np.random.default_rng(31)


class TestConfusion:
    def test_hand_example(self):
        # confusion [[3,1],[1,3]]: IoU 0.6/0.6, mIoU 0.6, total_acc 0.75
        gt = np.array([0, 0, 0, 0, 1, 1, 1, 1])
        pred = np.array([0, 0, 0, 1, 1, 1, 1, 0])
        conf = confusion_matrix(gt, pred, 2)
        np.testing.assert_array_equal(conf, [[3, 1], [1, 3]])
        rep = segmentation_report(conf)
        np.testing.assert_allclose(rep.per_class_iou, [0.6, 0.6])
        assert rep.miou == pytest.approx(0.6)
        assert rep.total_acc == pytest.approx(0.75)
        assert rep.avg_acc == pytest.approx(0.75)

    def test_perfect_prediction(self):
        gt = rng.integers(0, 4, size=200)
        rep = segmentation_report(confusion_matrix(gt, gt, 4))
        assert rep.miou == 1.0 and rep.total_acc == 1.0 and rep.avg_acc == 1.0

    def test_absent_class_excluded_from_miou(self):
        gt = np.array([0, 0, 1, 1])       # class 2 never appears in GT
        pred = np.array([0, 0, 1, 2])
        rep = segmentation_report(confusion_matrix(gt, pred, 3))
        # class 0 IoU 1.0; class 1 IoU 0.5; class 2 ignored
        assert rep.miou == pytest.approx((1.0 + 0.5) / 2)

    def test_accuracies_in_unit_interval(self):
        for seed in range(10):
            r = np.random.default_rng(seed)
            gt, pred = r.integers(0, 5, size=(2, 300))
            rep = segmentation_report(confusion_matrix(gt, pred, 5))
            for v in (rep.miou, rep.total_acc, rep.avg_acc):
                assert 0.0 <= v <= 1.0


class TestPSNR:
    def test_identical_images_capped(self):
        img = rng.uniform(size=(16, 16, 3))
        assert psnr(img, img) == PSNR_CAP

    def test_known_mse(self):
        a = np.zeros((8, 8, 3))
        b = np.full((8, 8, 3), 0.5)
        assert psnr(a, b) == pytest.approx(10 * np.log10(1 / 0.25))

    def test_monotone_in_noise(self):
        img = rng.uniform(0.2, 0.8, size=(20, 20, 3))
        vals = [psnr(img + eps * rng.standard_normal(img.shape), img)
                for eps in (0.01, 0.05, 0.2)]
        assert vals[0] > vals[1] > vals[2]


class TestSSIM:
    def test_identical_images_one(self):
        img = rng.uniform(size=(24, 24, 3))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)

    def test_noise_lowers_score(self):
        img = rng.uniform(0.3, 0.7, size=(24, 24, 3))
        noisy = np.clip(img + 0.15 * rng.standard_normal(img.shape), 0, 1)
        s = ssim(img, noisy)
        assert 0.0 < s < 0.95

    def test_small_image_rejected(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((6, 6, 3)), np.zeros((6, 6, 3)))

    def test_constant_shift_detected(self):
        img = rng.uniform(0.2, 0.6, size=(24, 24, 3))
        shifted = np.clip(img + 0.2, 0, 1)
        assert ssim(img, shifted) < 1.0
