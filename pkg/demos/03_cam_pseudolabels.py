"""From features to CAMs to hard pseudo-labels.

Shows the weighting + max-min normalization, the two-threshold split into
background / ignore / foreground, and how lowering the foreground
threshold grows the supervised region (the schedule does this over
training).

Run:  python3 demos/03_cam_pseudolabels.py
"""

import numpy as np

from dualcam.cam import (IGNORE, cam_to_pseudolabel, cam_to_relaxed_label,
                         compute_cam)
from dualcam.filtering import ThresholdSchedule

rng = np.random.default_rng(3)

# hand-built features: channel 0 lights up a disc, channel 1 a corner blob
h = w = 24
yy, xx = np.mgrid[0:h, 0:w]
features = np.zeros((2, h, w))
features[0] = np.exp(-(((yy - 10) ** 2 + (xx - 9) ** 2) / 30.0))
features[1] = np.exp(-(((yy - 20) ** 2 + (xx - 20) ** 2) / 14.0))

# classifier weights: class 1 reads channel 0, class 2 reads channel 1
weights = np.array([[1.0, 0.0], [0.0, 1.0]])
cam = compute_cam(features, weights, present_classes={1, 2})
print(f"normalized CAM range per class: "
      f"{[(float(m.min()), float(m.max())) for m in cam.values]}")

for tau_h in (0.9, 0.7, 0.55):
    labels = cam_to_pseudolabel(cam, tau_l=0.25, tau_h=tau_h).labels
    fg = int((labels > 0).sum() - (labels == IGNORE).sum())
    print(f"tau_h={tau_h:.2f}: foreground={np.isin(labels, [1, 2]).sum():4d} px, "
          f"ignore={int((labels == IGNORE).sum()):4d} px, "
          f"background={int((labels == 0).sum()):4d} px")

relaxed = cam_to_relaxed_label(cam, tau_l=0.25).labels
print(f"relaxed labels never ignore: {not np.any(relaxed == IGNORE)}")

print("\nthe cosine threshold schedule walks tau_h down over training:")
sched = ThresholdSchedule(tau_h_start=0.7, tau_h_end=0.55, total_iters=3000,
                          tau_l=0.25)
for t in (0, 750, 1500, 2250, 3000):
    print(f"  t={t:4d}: tau_h(t) = {sched.tau_h_at(t):.4f}")
