"""The four objectives: values against references, masking contracts,
symmetry, and the phased total."""

import math

import numpy as np
import pytest

from dualcam.autodiff import Tensor, backward, stop_gradient
from dualcam.cam import IGNORE
from dualcam.data import AugmentRecord
from dualcam.errors import ConfigurationError
from dualcam.losses import (LossWeights, PHASE_CLS_WARMUP, PHASE_FULL,
                            PHASE_SEG_WARMUP, classification_loss,
                            consistency_loss, cross_supervision_loss,
                            discrepancy_loss, supervised_seg_loss, total_loss)

rng = np.random.default_rng(99)


def _scalar(v):
    return Tensor(np.asarray(float(v)))


class TestClassificationLoss:
    def test_zero_logits_ln2(self):
        for labels in (np.zeros((2, 3)), np.ones((2, 3))):
            loss = classification_loss(Tensor(np.zeros((2, 3))), labels)
            assert abs(loss.item() - math.log(2)) < 1e-12

    def test_confident_correct_goes_to_zero(self):
        loss = classification_loss(Tensor(np.full((2, 3), 40.0)), np.ones((2, 3)))
        assert loss.item() < 1e-12

    def test_matches_elementwise_reference(self):
        z = rng.standard_normal((4, 5)) * 3
        y = (rng.random((4, 5)) > 0.5).astype(float)
        loss = classification_loss(Tensor(z), y)
        sig = 1 / (1 + np.exp(-z))
        ref = -(y * np.log(sig) + (1 - y) * np.log(1 - sig)).mean()
        assert abs(loss.item() - ref) < 1e-9


class TestDiscrepancyLoss:
    def test_orthogonal_zero(self):
        f1 = np.zeros((1, 2, 1, 2))
        f2 = np.zeros((1, 2, 1, 2))
        f1[0, 0] = 1.0
        f2[0, 1] = 1.0
        assert abs(discrepancy_loss(Tensor(f1), Tensor(f2)).item()) < 1e-12

    def test_identical_clamped_ceiling(self):
        f = rng.random((1, 3, 2, 2)) + 0.1
        loss = discrepancy_loss(Tensor(f), Tensor(f.copy()))
        assert abs(loss.item() - 2 * (-math.log(1e-4))) < 1e-9
        assert abs(loss.item() - 18.42) < 0.01

    def test_opposite_negative_value(self):
        f = rng.random((1, 3, 2, 2)) + 0.1
        loss = discrepancy_loss(Tensor(f), Tensor(-f))
        assert abs(loss.item() - 2 * (-math.log(2.0))) < 1e-12

    def test_symmetry_exact(self):
        f1 = rng.standard_normal((3, 4, 2, 2))
        f2 = rng.standard_normal((3, 4, 2, 2))
        a = discrepancy_loss(Tensor(f1), Tensor(f2)).item()
        b = discrepancy_loss(Tensor(f2), Tensor(f1)).item()
        assert a == b

    def test_stop_gradient_blocks_partner(self):
        f1 = Tensor(rng.standard_normal((2, 3, 2, 2)), requires_grad=True)
        f2 = Tensor(rng.standard_normal((2, 3, 2, 2)), requires_grad=True)
        n = f1.data.shape[0]
        from dualcam.autodiff import neg_log_one_minus_cosine
        loss = neg_log_one_minus_cosine(f1.reshape(n, -1),
                                        stop_gradient(f2.reshape(n, -1)))
        backward(loss)
        assert f1.grad is not None and np.any(f1.grad != 0)
        assert f2.grad is None

    def test_both_sides_get_grads_in_symmetrized_form(self):
        f1 = Tensor(rng.standard_normal((2, 3, 2, 2)), requires_grad=True)
        f2 = Tensor(rng.standard_normal((2, 3, 2, 2)), requires_grad=True)
        backward(discrepancy_loss(f1, f2))
        assert np.any(f1.grad != 0) and np.any(f2.grad != 0)


def _one_hot_logits(labels, k, margin=25.0):
    n, h, w = labels.shape
    logits = np.full((n, k, h, w), -margin)
    safe = np.minimum(labels, k - 1).astype(int)
    np.put_along_axis(logits, safe[:, None], margin, axis=1)
    return logits


class TestCrossSupervision:
    def test_all_ignore_zero_loss_zero_grads(self):
        labels = np.full((2, 4, 4), IGNORE, dtype=np.uint8)
        s1 = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        s2 = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        loss, counts = cross_supervision_loss(s1, s2, labels, labels, None, None)
        assert loss.item() == 0.0 and counts["supervised"] == 0
        backward(loss)
        np.testing.assert_array_equal(s1.grad, 0.0)
        np.testing.assert_array_equal(s2.grad, 0.0)

    def test_perfect_prediction_near_zero(self):
        labels = rng.integers(0, 3, (2, 4, 4)).astype(np.uint8)
        logits = _one_hot_logits(labels, 3)
        loss, _ = cross_supervision_loss(Tensor(logits), Tensor(logits.copy()),
                                         labels, labels, None, None)
        assert loss.item() < 1e-9

    def test_swap_symmetry_exact(self):
        s1 = rng.standard_normal((2, 3, 4, 4))
        s2 = rng.standard_normal((2, 3, 4, 4))
        y1 = rng.integers(0, 3, (2, 4, 4)).astype(np.uint8)
        y2 = rng.integers(0, 3, (2, 4, 4)).astype(np.uint8)
        f1 = rng.random((2, 4, 4)) > 0.8
        f2 = rng.random((2, 4, 4)) > 0.8
        a, _ = cross_supervision_loss(Tensor(s1), Tensor(s2), y1, y2, f1, f2)
        b, _ = cross_supervision_loss(Tensor(s2), Tensor(s1), y2, y1, f2, f1)
        assert a.item() == b.item()

    def test_ignored_pixel_gradient_nullity_exact(self):
        labels = rng.integers(0, 3, (1, 4, 4)).astype(np.uint8)
        labels[0, 0, :] = IGNORE
        logits = rng.standard_normal((1, 3, 4, 4))
        base, _ = supervised_seg_loss(Tensor(logits), labels, None)
        perturbed = logits.copy()
        perturbed[0, :, 0, :] += rng.standard_normal((3, 4)) * 100
        after, _ = supervised_seg_loss(Tensor(perturbed), labels, None)
        assert base.item() == after.item()

    def test_filter_monotonicity(self):
        labels = rng.integers(0, 3, (2, 6, 6)).astype(np.uint8)
        logits = Tensor(rng.standard_normal((2, 3, 6, 6)))
        small = rng.random((2, 6, 6)) > 0.8
        large = small | (rng.random((2, 6, 6)) > 0.7)
        _, inc_small = supervised_seg_loss(logits, labels, small)
        _, inc_large = supervised_seg_loss(Tensor(logits.data), labels, large)
        assert inc_large.sum() <= inc_small.sum()

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            supervised_seg_loss(Tensor(rng.standard_normal((1, 3, 4, 4))),
                                np.zeros((1, 5, 5), dtype=np.uint8), None)


class TestConsistencyLoss:
    def test_empty_mask_zero(self):
        logits = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        labels = rng.integers(0, 3, (2, 4, 4)).astype(np.uint8)
        mask = np.zeros((2, 4, 4), bool)
        records = [AugmentRecord.identity()] * 2
        loss = consistency_loss(logits, labels, records, mask)
        assert loss.item() == 0.0

    def test_identity_record_full_mask_is_plain_ce(self):
        from dualcam.autodiff import masked_softmax_ce
        logits = rng.standard_normal((2, 3, 4, 4))
        labels = rng.integers(0, 3, (2, 4, 4)).astype(np.uint8)
        mask = np.ones((2, 4, 4), bool)
        records = [AugmentRecord.identity()] * 2
        loss = consistency_loss(Tensor(logits), labels, records, mask)
        ref = masked_softmax_ce(Tensor(logits), labels, mask)
        assert abs(loss.item() - ref.item()) < 1e-12

    def test_hflip_equivariance(self):
        logits = rng.standard_normal((1, 3, 4, 4))
        labels = rng.integers(0, 3, (1, 4, 4)).astype(np.uint8)
        mask = rng.random((1, 4, 4)) > 0.3
        flip_record = AugmentRecord(hflip=True, scale_factor=1.0, crop_offset=(0, 0),
                                    gains=np.ones(3), biases=np.zeros(3),
                                    grayscale=False)
        flipped = consistency_loss(Tensor(logits[..., ::-1].copy()), labels,
                                   [flip_record], mask)
        plain = consistency_loss(Tensor(logits), labels,
                                 [AugmentRecord.identity()], mask)
        assert abs(flipped.item() - plain.item()) < 1e-12

    def test_batch_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            consistency_loss(Tensor(rng.standard_normal((2, 3, 4, 4))),
                             np.zeros((2, 4, 4), np.uint8),
                             [AugmentRecord.identity()],
                             np.ones((2, 4, 4), bool))


class TestTotalLoss:
    def test_paper_default_weights(self):
        w = LossWeights()
        assert (w.lambda1, w.lambda2, w.lambda3) == (0.1, 0.1, 0.05)

    def test_zero_weights_reduce_to_classification(self):
        total, report = total_loss(_scalar(0.7), _scalar(2.0), _scalar(3.0),
                                   _scalar(4.0), LossWeights(0, 0, 0), PHASE_FULL)
        assert abs(total.item() - 0.7) < 1e-12

    def test_unit_parts_paper_weights(self):
        total, report = total_loss(_scalar(1), _scalar(1), _scalar(1), _scalar(1),
                                   LossWeights(), PHASE_FULL)
        assert abs(total.item() - 1.25) < 1e-12

    def test_report_reconstructs_total(self):
        w = LossWeights()
        total, r = total_loss(_scalar(0.3), _scalar(1.1), _scalar(0.9),
                              _scalar(0.2), w, PHASE_FULL)
        recon = r.l_cls + w.lambda1 * r.l_dis + w.lambda2 * r.l_seg + w.lambda3 * r.l_reg
        assert abs(r.total - recon) < 1e-9

    def test_phase_gating(self):
        w = LossWeights()
        total_a, ra = total_loss(_scalar(1), _scalar(1), _scalar(1), _scalar(1),
                                 w, PHASE_CLS_WARMUP)
        assert abs(total_a.item() - 1.1) < 1e-12 and ra.l_seg == 0 and ra.l_reg == 0
        total_b, rb = total_loss(_scalar(1), _scalar(1), _scalar(1), _scalar(1),
                                 w, PHASE_SEG_WARMUP)
        assert abs(total_b.item() - 1.2) < 1e-12 and rb.l_reg == 0

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigurationError):
            LossWeights(lambda1=-0.1)
