"""End-to-end miniature run: generate data, train the dual-student model
for a few hundred iterations, and read the metric log.

This is a scaled-down illustration (small dataset, short schedule); the
acceptance-scale recipe lives in the README.

Run:  python3 demos/05_training_loop.py          (about 2 minutes)
"""

import csv
import tempfile
from collections import defaultdict
from pathlib import Path

from dualcam.config import TrainConfig
from dualcam.data import generate_dataset
from dualcam.train import train

root = Path(tempfile.mkdtemp(prefix="dualcam_demo_run_"))
generate_dataset(n_train=80, n_val=20, h=64, w=64, c=4, seed=11,
                 out_dir=root / "data")

cfg = TrainConfig(
    data_dir=str(root / "data"),
    out_dir=str(root / "run"),
    total_iters=400,
    warmup_cls_iters=40,
    warmup_seg_iters=160,
    eval_interval=100,
    checkpoint_interval=400,
    lr=5e-4,
    seed=0,
)
print(f"training 400 iterations in {root} ...")
summary = train(cfg)

print("\nper-eval validation metrics:")
by_iter = defaultdict(dict)
with open(summary["metrics"], newline="") as fh:
    for row in csv.DictReader(fh):
        if row["split"] == "val" and row["metric"].endswith("_mean") and row["value"]:
            by_iter[int(row["iteration"])][row["metric"]] = float(row["value"])
for t in sorted(by_iter):
    vals = by_iter[t]
    print(f"  iter {t:4d}: " + "  ".join(f"{k}={v:.3f}" for k, v in sorted(vals.items())))

mean = summary["final_eval"]["mean"]
print(f"\nfinal: seg mIoU {mean['seg_miou']:.3f} | "
      f"pseudo-label mIoU {mean['pseudolabel_miou']:.3f} "
      f"(coverage {mean['pseudolabel_coverage']:.3f}) | "
      f"foreground over-activation {mean['oa_fg_mean']:.3f}")
print(f"checkpoint: {summary['checkpoint']}")
