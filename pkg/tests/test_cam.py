"""CAM generation, max-min normalization, and threshold-based pseudo-labels."""

import numpy as np
import pytest

from dualcam.cam import (IGNORE, CamMap, cam_to_pseudolabel, cam_to_relaxed_label,
                         compute_cam, labels_from_cam_batch, normalize_cam)
from dualcam.errors import ConfigurationError

rng = np.random.default_rng(42)


def _brute_force_labels(values, present, tau_l, tau_h):
    """Per-pixel reference for the background/ignore/foreground split."""
    c, h, w = values.shape
    out = np.empty((h, w), dtype=np.uint8)
    for y in range(h):
        for x in range(w):
            best, best_cls = -1.0, 0
            for k in range(c):
                score = values[k, y, x] if present[k] else 0.0
                if score > best:
                    best, best_cls = score, k + 1
            if best >= tau_h:
                out[y, x] = best_cls
            elif best <= tau_l:
                out[y, x] = 0
            else:
                out[y, x] = IGNORE
    return out


class TestComputeCam:
    def test_one_hot_weighting_selects_channel(self):
        feats = np.zeros((3, 4, 4))
        feats[1] = rng.random((4, 4)) + 0.5
        weights = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
        cam = compute_cam(feats, weights, present_classes={1})
        expected = (feats[1] - feats[1].min()) / (feats[1].max() - feats[1].min())
        np.testing.assert_allclose(cam.values[0], expected, atol=1e-12)
        np.testing.assert_array_equal(cam.values[1], 0.0)

    def test_all_zero_features_give_zero_cam(self):
        cam = compute_cam(np.zeros((3, 4, 4)), rng.random((2, 3)),
                          present_classes={1, 2})
        np.testing.assert_array_equal(cam.values, 0.0)

    def test_hand_evaluated_weighted_sum(self):
        feats = np.zeros((2, 2, 2))
        feats[0] = [[1.0, 0.0], [0.0, 0.0]]
        feats[1] = [[0.0, 0.0], [0.0, 1.0]]
        weights = np.array([[1.0, 1.0]])
        cam = compute_cam(feats, weights, present_classes={1})
        np.testing.assert_allclose(cam.values[0], [[1.0, 0.0], [0.0, 1.0]], atol=1e-12)

    def test_negative_activations_clipped(self):
        feats = np.zeros((1, 2, 2))
        feats[0] = [[-5.0, -1.0], [-0.5, -2.0]]
        cam = compute_cam(feats, np.array([[1.0]]), present_classes={1})
        np.testing.assert_array_equal(cam.values, 0.0)

    def test_empty_present_classes_all_zero(self):
        cam = compute_cam(rng.random((3, 4, 4)), rng.random((2, 3)),
                          present_classes=set())
        np.testing.assert_array_equal(cam.values, 0.0)

    def test_resize_to_image_resolution(self):
        cam = compute_cam(rng.random((3, 4, 4)), rng.random((2, 3)),
                          present_classes={1}, out_h=16, out_w=16)
        assert cam.values.shape == (2, 16, 16)
        assert cam.values.min() >= 0.0 and cam.values.max() <= 1.0


class TestThresholding:
    def test_paper_thresholds_foreground(self):
        values = np.zeros((2, 1, 1))
        values[0, 0, 0] = 0.8
        cam = CamMap(values=values, present=np.array([True, False]))
        out = cam_to_pseudolabel(cam, 0.25, 0.7)
        assert out.labels[0, 0] == 1
        assert out.tau_l == 0.25 and out.tau_h == 0.7

    def test_low_score_background(self):
        values = np.full((2, 1, 1), 0.1)
        cam = CamMap(values=values, present=np.array([True, True]))
        assert cam_to_pseudolabel(cam, 0.25, 0.7).labels[0, 0] == 0

    def test_band_ignored(self):
        values = np.full((1, 1, 1), 0.5)
        cam = CamMap(values=values, present=np.array([True]))
        assert cam_to_pseudolabel(cam, 0.25, 0.7).labels[0, 0] == IGNORE

    def test_agrees_with_bruteforce_on_random_cams(self):
        for _ in range(1000):
            c = int(rng.integers(1, 5))
            present = rng.random(c) > 0.3
            values = normalize_cam(rng.random((c, 3, 3)), present)
            tau_l = float(rng.uniform(0.0, 0.6))
            tau_h = float(rng.uniform(tau_l + 0.05, 1.0))
            got = labels_from_cam_batch(values[None], present[None], tau_l, tau_h)[0]
            np.testing.assert_array_equal(
                got, _brute_force_labels(values, present, tau_l, tau_h))

    def test_tie_breaks_to_lowest_class(self):
        values = np.full((3, 1, 1), 0.9)
        cam = CamMap(values=values, present=np.array([True, True, True]))
        assert cam_to_pseudolabel(cam, 0.25, 0.7).labels[0, 0] == 1

    def test_bad_thresholds_rejected(self):
        cam = CamMap(values=np.zeros((1, 2, 2)), present=np.array([True]))
        with pytest.raises(ConfigurationError):
            cam_to_pseudolabel(cam, 0.7, 0.7)
        with pytest.raises(ConfigurationError):
            cam_to_pseudolabel(cam, 0.8, 0.7)


class TestRelaxedLabels:
    def test_above_tau_l_foreground(self):
        cam = CamMap(values=np.full((1, 1, 1), 0.5), present=np.array([True]))
        assert cam_to_relaxed_label(cam, 0.25).labels[0, 0] == 1

    def test_below_tau_l_background(self):
        cam = CamMap(values=np.full((1, 1, 1), 0.2), present=np.array([True]))
        assert cam_to_relaxed_label(cam, 0.25).labels[0, 0] == 0

    def test_matches_strict_outside_ignore_band(self):
        for _ in range(100):
            c = int(rng.integers(1, 4))
            present = rng.random(c) > 0.2
            values = normalize_cam(rng.random((c, 4, 4)), present)
            cam = CamMap(values=values, present=present)
            strict = cam_to_pseudolabel(cam, 0.25, 0.7).labels
            relaxed = cam_to_relaxed_label(cam, 0.25).labels
            decided = strict != IGNORE
            np.testing.assert_array_equal(strict[decided], relaxed[decided])
            assert not np.any(relaxed == IGNORE)


class TestInvariants:
    def test_lower_tau_h_grows_foreground(self):
        present = np.array([True, True])
        values = normalize_cam(rng.random((2, 8, 8)), present)
        cam = CamMap(values=values, present=present)
        prev_fg = None
        for tau_h in (0.9, 0.7, 0.5, 0.3):
            labels = cam_to_pseudolabel(cam, 0.25, tau_h).labels
            fg = set(map(tuple, np.argwhere((labels > 0) & (labels != IGNORE))))
            if prev_fg is not None:
                assert prev_fg <= fg
            prev_fg = fg

    def test_normalization_idempotent(self):
        present = np.array([True, True])
        once = normalize_cam(rng.random((2, 6, 6)), present)
        twice = normalize_cam(once, present)
        np.testing.assert_allclose(twice, once, atol=1e-7)

    def test_weight_scaling_leaves_labels_unchanged(self):
        feats = rng.random((3, 5, 5))
        weights = rng.standard_normal((2, 3))
        base = compute_cam(feats, weights, present_classes={1, 2})
        scaled = compute_cam(feats, 4.2 * weights, present_classes={1, 2})
        np.testing.assert_allclose(scaled.values, base.values, atol=1e-10)
        lb = cam_to_pseudolabel(base, 0.25, 0.7).labels
        ls = cam_to_pseudolabel(scaled, 0.25, 0.7).labels
        np.testing.assert_array_equal(lb, ls)

    def test_normalized_range_per_present_class(self):
        present = np.array([True, True, False])
        values = normalize_cam(rng.random((3, 6, 6)) + 0.2, present)
        for k in range(2):
            assert abs(values[k].min()) < 1e-12
            assert abs(values[k].max() - 1.0) < 1e-12
        np.testing.assert_array_equal(values[2], 0.0)
