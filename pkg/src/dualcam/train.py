"""Training loop, evaluation pass, and metric logging.

One iteration: weak-augment a batch, forward every sub-net, derive CAM
pseudo-labels from each sub-net's own features and classifier weights at
the scheduled threshold, optionally fit the per-image noise filter against
the labels that will supervise each sub-net, combine the phase-gated
losses, and take one AdamW step per sub-net. With `dual_student` off a
single net supervises itself (the ablation baseline).

Metrics go to `<out_dir>/metrics.csv` with columns
iteration,split,metric,class,value; checkpoints to
`<out_dir>/checkpoints/*.dupl`.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from .autodiff import Tensor, backward, no_grad
from .cam import (IGNORE, compute_cam_batch, labels_from_cam_batch,
                  relaxed_labels_from_cam_batch)
from .config import TrainConfig, save_config
from .data import (SynthSample, load_dataset, strong_augment, weak_augment,
                   write_pgm)
from .errors import ConfigurationError, NumericError
from .filtering import (NoiseFilterConfig, ThresholdSchedule,
                        adaptive_noise_filter, pixel_loss_map)
from .losses import (LossWeights, PHASE_CLS_WARMUP, PHASE_FULL,
                     PHASE_SEG_WARMUP, classification_loss, consistency_loss,
                     cross_supervision_loss, discrepancy_loss,
                     supervised_seg_loss, total_loss)
from .metrics import ConfusionMatrix, miou, over_activation_rate, pseudolabel_quality
from .model import DualStudent
from .optim import AdamW

logger = logging.getLogger(__name__)


class MetricLog:
    """Append-only CSV sink: iteration,split,metric,class,value."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(["iteration", "split", "metric", "class", "value"])

    def add(self, iteration: int, split: str, metric: str, value, cls: str = ""):
        if value is None or (isinstance(value, float) and np.isnan(value)):
            formatted = ""
        else:
            formatted = f"{float(value):.12g}"
        self._writer.writerow([iteration, split, metric, cls, formatted])

    def flush(self):
        self._fh.flush()

    def close(self):
        self._fh.close()


def phase_of(t: int, cfg: TrainConfig) -> str:
    if t < cfg.warmup_cls_iters:
        return PHASE_CLS_WARMUP
    if t < cfg.warmup_seg_iters:
        return PHASE_SEG_WARMUP
    return PHASE_FULL


def build_model(cfg: TrainConfig) -> DualStudent:
    return DualStudent.create(
        cfg.num_classes, cfg.seed, dual=cfg.dual_student,
        widths=cfg.widths_tuple(), head_dilation=cfg.head_dilation)


def evaluate_model(model: DualStudent, samples: list[SynthSample],
                   cfg: TrainConfig, tau_h: float | None = None,
                   dump_dir=None) -> dict:
    """Clean-view evaluation: CAM pseudo-label quality at the given
    threshold (default: the final scheduled value), segmentation mIoU, and
    per-class over-activation rates, per sub-net plus the cross-net mean."""
    c = cfg.num_classes
    if tau_h is None:
        tau_h = cfg.tau_h_end if cfg.use_dta else cfg.tau_h_start
    nets = model.subnets
    seg_cms = [ConfusionMatrix(c) for _ in nets]
    label_maps: list[list[np.ndarray]] = [[] for _ in nets]
    gt_maps: list[np.ndarray] = []

    with no_grad():
        for start in range(0, len(samples), cfg.batch_size):
            batch = samples[start:start + cfg.batch_size]
            images = Tensor(np.stack([s.image for s in batch]))
            present = np.stack([s.label for s in batch]).astype(bool)
            gt = np.stack([s.gt_mask for s in batch])
            gt_maps.extend(gt)
            h, w = gt.shape[1:]
            for i, net in enumerate(nets):
                feats, _, seg_logits = net.forward(images)
                pred = seg_logits.data.argmax(axis=1).astype(np.uint8)
                for b in range(len(batch)):
                    seg_cms[i].accumulate(pred[b], gt[b])
                cams = compute_cam_batch(feats.data, net.classifier_weight.data,
                                         present, h, w)
                labels = labels_from_cam_batch(cams, present, cfg.tau_l, tau_h)
                label_maps[i].extend(labels)

    per_net = []
    for i in range(len(nets)):
        quality = pseudolabel_quality(label_maps[i], gt_maps, c)
        seg_miou, seg_per_class = miou(seg_cms[i])
        oa = quality["oa_rate"]
        per_net.append({
            "pseudolabel_miou": quality["miou"],
            "pseudolabel_coverage": quality["coverage"],
            "seg_miou": seg_miou,
            "seg_per_class_iou": seg_per_class,
            "oa_rate": oa,
            "oa_fg_mean": float(np.nanmean(oa[1:])) if np.any(np.isfinite(oa[1:])) else None,
            "seg_oa_rate": over_activation_rate(seg_cms[i]),
        })
        if dump_dir is not None:
            dump = Path(dump_dir)
            dump.mkdir(parents=True, exist_ok=True)
            for s, labels in zip(samples, label_maps[i]):
                write_pgm(dump / f"{s.sample_id}_net{i + 1}.pgm", labels)

    def _mean(key):
        vals = [p[key] for p in per_net if p[key] is not None]
        return float(np.mean(vals)) if vals else None

    return {
        "per_net": per_net,
        "mean": {k: _mean(k) for k in
                 ("pseudolabel_miou", "pseudolabel_coverage", "seg_miou", "oa_fg_mean")},
        "tau_h": tau_h,
    }


def _log_eval(log: MetricLog, t: int, result: dict):
    for i, p in enumerate(result["per_net"], start=1):
        log.add(t, "val", f"pseudolabel_miou_net{i}", p["pseudolabel_miou"])
        log.add(t, "val", f"pseudolabel_coverage_net{i}", p["pseudolabel_coverage"])
        log.add(t, "val", f"seg_miou_net{i}", p["seg_miou"])
        log.add(t, "val", f"oa_fg_mean_net{i}", p["oa_fg_mean"])
        for cls in range(1, len(p["oa_rate"])):
            log.add(t, "val", f"oa_pseudo_net{i}", p["oa_rate"][cls], cls=str(cls))
    for key, value in result["mean"].items():
        log.add(t, "val", f"{key}_mean", value)


def train(cfg: TrainConfig) -> dict:
    """Run the full three-phase loop; returns summary paths and final metrics."""
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    save_config(cfg, out / "config.txt")

    train_samples = load_dataset(cfg.data_dir, split="train")
    val_samples = load_dataset(cfg.data_dir, split="val")
    c = cfg.num_classes
    if train_samples[0].label.shape[0] != c:
        raise ConfigurationError(
            f"dataset has {train_samples[0].label.shape[0]} classes, config says {c}")

    model = build_model(cfg)
    nets = model.subnets
    optims = [AdamW(net.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                    eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
              for net in nets]
    schedule = ThresholdSchedule(cfg.tau_h_start, cfg.tau_h_end,
                                 cfg.total_iters, cfg.tau_l)
    nf_cfg = NoiseFilterConfig(cfg.gamma, cfg.eta, cfg.min_valid_pixels,
                               cfg.max_em_iters, cfg.em_tol, cfg.variance_floor)
    weights = LossWeights(cfg.lambda1, cfg.lambda2, cfg.lambda3)

    log = MetricLog(out / "metrics.csv")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5eed]))
    order: list[int] = []
    last_report = None
    last_fits = []
    final_eval = None

    try:
        for t in range(cfg.total_iters):
            phase = phase_of(t, cfg)
            while len(order) < cfg.batch_size:
                order.extend(rng.permutation(len(train_samples)).tolist())
            idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
            batch = [train_samples[i] for i in idx]
            aug_seeds = rng.integers(0, 2 ** 62, size=cfg.batch_size)
            images = np.stack([weak_augment(s, int(seed))[0]
                               for s, seed in zip(batch, aug_seeds)])
            image_labels = np.stack([s.label for s in batch]).astype(np.float32)
            present = image_labels.astype(bool)
            n, _, h, w = images.shape

            images_t = Tensor(images)
            with_seg = phase != PHASE_CLS_WARMUP
            feats, class_logits, seg_logits = zip(
                *(net.forward(images_t, with_seg=with_seg) for net in nets))

            tau_h = schedule.tau_h_at(t) if cfg.use_dta else cfg.tau_h_start
            cams = strict = None
            if with_seg:
                cams = [compute_cam_batch(f.data, net.classifier_weight.data,
                                          present, h, w)
                        for net, f in zip(nets, feats)]
                strict = [labels_from_cam_batch(cam, present, cfg.tau_l, tau_h)
                          for cam in cams]

            # noise filters: each sub-net's prediction against the labels
            # that will supervise it
            filters: list[np.ndarray | None] = [None] * len(nets)
            last_fits = []
            if phase == PHASE_FULL and cfg.use_anf:
                for i in range(len(nets)):
                    sup = strict[1 - i] if len(nets) == 2 else strict[0]
                    mask = np.zeros((n, h, w), dtype=bool)
                    for b in range(n):
                        lmap, valid = pixel_loss_map(seg_logits[i].data[b], sup[b])
                        mask[b], fit = adaptive_noise_filter(lmap, valid, nf_cfg)
                        if fit is not None:
                            last_fits.append(fit)
                    filters[i] = mask

            l_cls = classification_loss(class_logits[0], image_labels)
            for cl in class_logits[1:]:
                l_cls = l_cls + classification_loss(cl, image_labels)

            l_dis = None
            if len(nets) == 2 and cfg.use_dis:
                l_dis = discrepancy_loss(feats[0], feats[1])

            l_seg = None
            counts = {"supervised": 0, "ignored": 0, "filtered": 0}
            if with_seg:
                if len(nets) == 2:
                    l_seg, counts = cross_supervision_loss(
                        seg_logits[0], seg_logits[1], strict[0], strict[1],
                        filters[0], filters[1])
                else:
                    l_seg, include = supervised_seg_loss(seg_logits[0], strict[0],
                                                         filters[0])
                    counts = {"supervised": int(include.sum()),
                              "ignored": int((strict[0] == IGNORE).sum()),
                              "filtered": int(0 if filters[0] is None
                                              else filters[0].sum())}

            l_reg = None
            if phase == PHASE_FULL and cfg.use_reg:
                strong_seeds = rng.integers(0, 2 ** 62, size=n)
                strong_pairs = [strong_augment(images[b], int(strong_seeds[b]))
                                for b in range(n)]
                strong_t = Tensor(np.stack([p[0] for p in strong_pairs]))
                records = [p[1] for p in strong_pairs]
                for i, net in enumerate(nets):
                    _, _, strong_seg = net.forward(strong_t)
                    relaxed = relaxed_labels_from_cam_batch(cams[i], present, cfg.tau_l)
                    mask = strict[i] == IGNORE
                    if filters[i] is not None:
                        mask = mask | filters[i]
                    term = consistency_loss(strong_seg, relaxed, records, mask)
                    l_reg = term if l_reg is None else l_reg + term

            total, report = total_loss(l_cls, l_dis, l_seg, l_reg, weights, phase)
            last_report = report
            backward(total)
            for opt in optims:
                opt.step()
                opt.zero_grad()

            pixels = len(nets) * n * h * w
            log.add(t, "train", "loss_cls", report.l_cls)
            log.add(t, "train", "loss_dis", report.l_dis)
            log.add(t, "train", "loss_seg", report.l_seg)
            log.add(t, "train", "loss_reg", report.l_reg)
            log.add(t, "train", "loss_total", report.total)
            log.add(t, "train", "tau_h", tau_h)
            log.add(t, "train", "supervised_frac", counts["supervised"] / pixels)
            log.add(t, "train", "filtered_frac", counts["filtered"] / pixels)

            if (t + 1) % cfg.eval_interval == 0 or t == cfg.total_iters - 1:
                dump = (out / "labels") if cfg.dump_labels else None
                final_eval = evaluate_model(model, val_samples, cfg, dump_dir=dump)
                _log_eval(log, t, final_eval)
                log.flush()
            if (t + 1) % cfg.checkpoint_interval == 0:
                model.save_checkpoint(out / "checkpoints" / f"ckpt_{t + 1:06d}.dupl")
    except NumericError:
        _dump_diagnostics(out, last_report, last_fits)
        raise
    finally:
        log.close()

    final_ckpt = out / "checkpoints" / "final.dupl"
    model.save_checkpoint(final_ckpt)
    return {
        "checkpoint": str(final_ckpt),
        "metrics": str(out / "metrics.csv"),
        "final_eval": final_eval,
    }


def _dump_diagnostics(out: Path, report, fits):
    lines = ["non-finite loss encountered; aborting", f"last loss report: {report}"]
    lines += [f"gmm fit: {fit}" for fit in fits]
    (out / "diagnostic.txt").write_text("\n".join(lines) + "\n")
    logger.error("NaN/Inf during training; diagnostics at %s", out / "diagnostic.txt")
