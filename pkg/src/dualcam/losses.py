"""The four training objectives and their phased combination.

- classification: multi-label soft margin on image-level labels
- discrepancy: symmetrized -log(1 - cosine) between the two sub-nets'
  flattened per-image feature vectors, each direction stop-gradiented on
  the partner side
- segmentation: cross-supervision, each sub-net trained on the *other*
  sub-net's pseudo-labels with uncertain and noise-filtered pixels ignored
- consistency: cross-entropy of the perturbed-view prediction against the
  spatially replayed relaxed labels, restricted to the filtered region

Phases: the classifier warm-up trains classification + discrepancy only;
the segmentation warm-up adds cross-supervision; the full phase adds
consistency (noise filtering also only activates then, enforced by the
harness).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (Tensor, masked_softmax_ce, multilabel_soft_margin,
                       neg_log_one_minus_cosine, stop_gradient)
from .cam import IGNORE
from .data import AugmentRecord, replay_spatial
from .errors import ConfigurationError

PHASE_CLS_WARMUP = "cls-warmup"
PHASE_SEG_WARMUP = "seg-warmup"
PHASE_FULL = "full"


@dataclass
class LossWeights:
    lambda1: float = 0.1     # discrepancy
    lambda2: float = 0.1     # cross-supervision segmentation
    lambda3: float = 0.05    # consistency regularization

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigurationError("loss weights must be >= 0")


@dataclass
class LossReport:
    l_cls: float = 0.0
    l_dis: float = 0.0
    l_seg: float = 0.0
    l_reg: float = 0.0
    total: float = 0.0
    per_subnet: dict = field(default_factory=dict)
    n_supervised: int = 0
    n_ignored: int = 0
    n_filtered: int = 0


def classification_loss(class_logits: Tensor, image_labels: np.ndarray) -> Tensor:
    """Multi-label soft margin over (N,C) logits and binary labels."""
    return multilabel_soft_margin(class_logits, image_labels.astype(class_logits.dtype))


def discrepancy_loss(f1: Tensor, f2: Tensor, eps: float = 1e-4) -> Tensor:
    """Symmetrized batch-mean -log(1 - cos) with stop-gradient per direction:
    each sub-net is pushed away from the other's frozen features."""
    n = f1.data.shape[0]
    a = f1.reshape(n, -1)
    b = f2.reshape(n, -1)
    return neg_log_one_minus_cosine(a, stop_gradient(b), eps) + \
        neg_log_one_minus_cosine(b, stop_gradient(a), eps)


def supervised_seg_loss(seg_logits: Tensor, labels: np.ndarray,
                        noise_filter: np.ndarray | None) -> tuple[Tensor, np.ndarray]:
    """Pixel CE against pseudo-labels (N,H,W); uncertain-band pixels and
    noise-filtered pixels are ignored. Returns (loss, include mask)."""
    include = labels != IGNORE
    if noise_filter is not None:
        include = include & ~noise_filter
    return masked_softmax_ce(seg_logits, labels, include), include


def cross_supervision_loss(seg_logits_1: Tensor, seg_logits_2: Tensor,
                           labels_1: np.ndarray, labels_2: np.ndarray,
                           filter_1: np.ndarray | None,
                           filter_2: np.ndarray | None
                           ) -> tuple[Tensor, dict]:
    """CE(P1, Y2) + CE(P2, Y1) with per-direction noise filters.

    filter_i was fitted on sub-net i's loss map against the labels that
    supervise it (labels of the other sub-net).
    """
    term1, inc1 = supervised_seg_loss(seg_logits_1, labels_2, filter_1)
    term2, inc2 = supervised_seg_loss(seg_logits_2, labels_1, filter_2)
    counts = {
        "supervised": int(inc1.sum() + inc2.sum()),
        "ignored": int((labels_2 == IGNORE).sum() + (labels_1 == IGNORE).sum()),
        "filtered": int((0 if filter_1 is None else filter_1.sum())
                        + (0 if filter_2 is None else filter_2.sum())),
    }
    return term1 + term2, counts


def consistency_loss(strong_seg_logits: Tensor, relaxed_labels: np.ndarray,
                     records: list[AugmentRecord], mask: np.ndarray) -> Tensor:
    """CE of the perturbed-view prediction against the replayed relaxed
    labels, restricted to the replayed filtered-region mask and normalized
    by its pixel count per image (zero when empty).

    relaxed_labels and mask are (N,H,W) clean-view maps; records hold the
    spatial transforms of the perturbed views.
    """
    n = strong_seg_logits.data.shape[0]
    if len(records) != n or relaxed_labels.shape[0] != n or mask.shape[0] != n:
        raise ConfigurationError("consistency_loss batch size mismatch")
    labels_t = np.stack([replay_spatial(r, lab)
                         for r, lab in zip(records, relaxed_labels)])
    mask_t = np.stack([replay_spatial(r, m) for r, m in zip(records, mask)])
    include = mask_t & (labels_t != IGNORE)
    return masked_softmax_ce(strong_seg_logits, labels_t, include)


def total_loss(l_cls: Tensor, l_dis: Tensor | None, l_seg: Tensor | None,
               l_reg: Tensor | None, weights: LossWeights, phase: str
               ) -> tuple[Tensor, LossReport]:
    """Phase-gated linear combination; gated-off parts count as zero in the
    report so total always reconstructs from the parts."""
    if phase not in (PHASE_CLS_WARMUP, PHASE_SEG_WARMUP, PHASE_FULL):
        raise ConfigurationError(f"unknown phase {phase!r}")
    total = l_cls
    report = LossReport(l_cls=l_cls.item())
    if l_dis is not None:
        total = total + weights.lambda1 * l_dis
        report.l_dis = l_dis.item()
    if phase != PHASE_CLS_WARMUP and l_seg is not None:
        total = total + weights.lambda2 * l_seg
        report.l_seg = l_seg.item()
    if phase == PHASE_FULL and l_reg is not None:
        total = total + weights.lambda3 * l_reg
        report.l_reg = l_reg.item()
    report.total = total.item()
    return total, report
