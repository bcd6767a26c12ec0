"""Class activation maps and their conversion to hard pseudo-labels.

A CAM weights the backbone feature channels with the classifier's row for
each image-level class, clips negatives, max-min normalizes per class, and
is resized to image resolution. Hard labels then come from two background
thresholds: scores <= tau_l are background, >= tau_h are the argmax
foreground class, and the band in between is ignored (255).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import bilinear_resize_array
from .errors import ConfigurationError

IGNORE = 255


@dataclass
class CamMap:
    """Per-class activation maps in [0,1]; absent classes are all zero."""

    values: np.ndarray            # (C, H, W)
    present: np.ndarray           # (C,) bool

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]


@dataclass
class PseudoLabelMap:
    """Hard per-pixel labels: 0 background, 1..C foreground, 255 ignore."""

    labels: np.ndarray            # (H, W) uint8
    tau_l: float
    tau_h: float


def normalize_cam(raw: np.ndarray, present: np.ndarray) -> np.ndarray:
    """Per-class max-min normalization over spatial positions.

    Constant maps (max == min, e.g. all-zero after ReLU) normalize to all
    zeros rather than 0/0. Absent classes are zeroed. Works on (C,H,W) or
    batched (N,C,H,W) with present (N,C).
    """
    mn = raw.min(axis=(-2, -1), keepdims=True)
    mx = raw.max(axis=(-2, -1), keepdims=True)
    span = mx - mn
    out = np.where(span > 0, (raw - mn) / np.where(span > 0, span, 1.0), 0.0)
    return out * np.asarray(present, dtype=out.dtype)[..., None, None]


def compute_cam_batch(features: np.ndarray, class_weights: np.ndarray,
                      present: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Batched CAM: features (N,D,h,w), class_weights (C,D), present (N,C)
    -> normalized maps (N,C,out_h,out_w). Plain numpy fast path."""
    raw = np.maximum(np.einsum("cd,ndhw->nchw", class_weights, features,
                               optimize=True), 0.0)
    cams = normalize_cam(raw, present)
    if cams.shape[-2:] != (out_h, out_w):
        cams = np.clip(bilinear_resize_array(cams, out_h, out_w), 0.0, 1.0)
    return cams


def compute_cam(features: np.ndarray, class_weights: np.ndarray,
                present_classes, out_h: int | None = None,
                out_w: int | None = None) -> CamMap:
    """Single-image CAM from features (D,h,w) and classifier weights (C,D).

    `present_classes` holds the 1-based foreground class ids from the
    image-level label; an empty set yields an all-zero map. Maps are
    normalized at feature resolution, then bilinearly resized.
    """
    if features.ndim != 3 or class_weights.ndim != 2:
        raise ConfigurationError("compute_cam expects features (D,h,w), weights (C,D)")
    if features.shape[0] != class_weights.shape[1]:
        raise ConfigurationError(
            f"feature dim {features.shape[0]} != classifier dim {class_weights.shape[1]}")
    c = class_weights.shape[0]
    present = np.zeros(c, dtype=bool)
    for cls in present_classes:
        if not 1 <= cls <= c:
            raise ConfigurationError(f"class id {cls} out of range 1..{c}")
        present[cls - 1] = True
    out_h = out_h or features.shape[1]
    out_w = out_w or features.shape[2]
    values = compute_cam_batch(features[None], class_weights, present[None],
                               out_h, out_w)[0]
    return CamMap(values=values, present=present)


def labels_from_cam_batch(cams: np.ndarray, present: np.ndarray,
                          tau_l: float, tau_h: float) -> np.ndarray:
    """Batched thresholding: cams (N,C,H,W) -> labels (N,H,W) uint8."""
    if not 0.0 <= tau_l < tau_h <= 1.0:
        raise ConfigurationError(f"need 0 <= tau_l < tau_h <= 1, got ({tau_l}, {tau_h})")
    scores = cams * np.asarray(present, dtype=cams.dtype)[..., None, None]
    best = scores.max(axis=1)
    # ties resolve to the lowest class id (argmax returns first maximum)
    cls = scores.argmax(axis=1).astype(np.uint8) + 1
    labels = np.full(best.shape, IGNORE, dtype=np.uint8)
    labels[best <= tau_l] = 0
    fg = best >= tau_h
    labels[fg] = cls[fg]
    return labels


def relaxed_labels_from_cam_batch(cams: np.ndarray, present: np.ndarray,
                                  tau_l: float) -> np.ndarray:
    """Batched relaxed labels: argmax class where best > tau_l, else
    background; never ignore."""
    if not 0.0 <= tau_l < 1.0:
        raise ConfigurationError(f"need 0 <= tau_l < 1, got {tau_l}")
    scores = cams * np.asarray(present, dtype=cams.dtype)[..., None, None]
    best = scores.max(axis=1)
    cls = scores.argmax(axis=1).astype(np.uint8) + 1
    return np.where(best > tau_l, cls, 0).astype(np.uint8)


def cam_to_pseudolabel(cam: CamMap, tau_l: float, tau_h: float) -> PseudoLabelMap:
    """Background / ignore / foreground split of a single CamMap."""
    labels = labels_from_cam_batch(cam.values[None], cam.present[None],
                                   tau_l, tau_h)[0]
    return PseudoLabelMap(labels=labels, tau_l=tau_l, tau_h=tau_h)


def cam_to_relaxed_label(cam: CamMap, tau_l: float) -> PseudoLabelMap:
    """Two-way split with no ignore state (consistency-regularization targets)."""
    labels = relaxed_labels_from_cam_batch(cam.values[None], cam.present[None], tau_l)[0]
    return PseudoLabelMap(labels=labels, tau_l=tau_l, tau_h=float("nan"))
