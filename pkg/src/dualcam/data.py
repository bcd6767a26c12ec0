"""Synthetic shapes dataset, PPM/PGM I/O, and the augmentation pipelines.

Each image is a low-frequency textured background, 1-3 distractor blobs
(rotated ellipses drawn from the shared color palette), and 1-3 class
shapes. Class identity is the shape kind (circle, square, triangle,
cross, ...); each class *prefers* one palette color but takes any of the
others with substantial probability, so color is a useful-but-unreliable
cue: activation maps that key on color alone over-activate on
color-matched distractors and off-class shapes, and geometry is needed to
fix them. Ground-truth masks exist for evaluation only; training sees
image-level labels.

All augmentations are pure functions of (input, seed). Spatial transforms
are hflip -> scale -> crop-or-pad; images resample bilinearly, label maps
and masks with nearest neighbor (fractional labels would be meaningless),
and pixels that leave the view become ignore (255) or False.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import bilinear_resize_array
from .cam import IGNORE
from .errors import ConfigurationError, DataError

SHAPE_KINDS = ("circle", "square", "triangle", "cross",
               "ring", "diamond", "hbar", "vbar")

# shared palette: any shape or distractor may take any of these
PALETTE = (
    (0.80, 0.16, 0.16),   # red
    (0.16, 0.68, 0.22),   # green
    (0.20, 0.32, 0.82),   # blue
    (0.84, 0.76, 0.12),   # yellow
    (0.76, 0.22, 0.76),   # magenta
    (0.16, 0.70, 0.70),   # cyan
)

# probability that a class shape takes its preferred palette entry
COLOR_PRIOR = 0.85


@dataclass
class SynthSample:
    sample_id: str
    split: str
    image: np.ndarray        # (3, H, W) float32 in [0, 1]
    label: np.ndarray        # (C,) uint8 presence vector
    gt_mask: np.ndarray      # (H, W) uint8 in {0..C}; evaluation only


@dataclass
class AugmentRecord:
    """Everything needed to replay the spatial part of a perturbation on a
    label map; color parameters are recorded but never applied to labels."""

    hflip: bool
    scale_factor: float
    crop_offset: tuple[int, int]      # (dy, dx); crop start if scaled-up, paste start if scaled-down
    gains: np.ndarray                 # (3,)
    biases: np.ndarray                # (3,)
    grayscale: bool

    @classmethod
    def identity(cls) -> "AugmentRecord":
        return cls(hflip=False, scale_factor=1.0, crop_offset=(0, 0),
                   gains=np.ones(3), biases=np.zeros(3), grayscale=False)


# ----------------------------------------------------------------------
# PPM / PGM (binary, 8-bit)
# ----------------------------------------------------------------------


def write_ppm(path, image: np.ndarray):
    """image (3,H,W) float in [0,1] -> binary P6."""
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    _, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.transpose(1, 2, 0).tobytes())


def write_pgm(path, values: np.ndarray):
    """values (H,W) uint8 -> binary P5 (255 doubles as the ignore label)."""
    arr = np.asarray(values, dtype=np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def _read_pnm(path, magic: bytes) -> tuple[np.ndarray, int, int]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(magic):
        raise DataError(f"{path}: expected {magic.decode()} file")
    fields, pos = [], len(magic)
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1    # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit files supported")
    return np.frombuffer(blob, dtype=np.uint8, offset=pos), w, h


def read_ppm(path) -> np.ndarray:
    data, w, h = _read_pnm(path, b"P6")
    if data.size != 3 * w * h:
        raise DataError(f"{path}: truncated pixel data")
    return (data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0)


def read_pgm(path) -> np.ndarray:
    data, w, h = _read_pnm(path, b"P5")
    if data.size != w * h:
        raise DataError(f"{path}: truncated pixel data")
    return data.reshape(h, w).copy()


# ----------------------------------------------------------------------
# rendering
# ----------------------------------------------------------------------


def _shape_mask(kind: str, h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= 0.9 * r
    if kind == "triangle":
        # upward triangle: apex (cy-r, cx), base corners (cy+0.8r, cx -/+ r)
        inside = dy >= -r
        inside &= dy <= 0.8 * r
        inside &= dx * 1.8 * r <= (dy + r) * r            # right edge
        inside &= -dx * 1.8 * r <= (dy + r) * r           # left edge
        return inside
    if kind == "cross":
        bar = 0.5 * r
        return ((np.abs(dx) <= bar) & (np.abs(dy) <= r)) | \
               ((np.abs(dy) <= bar) & (np.abs(dx) <= r))
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "hbar":
        return (np.abs(dy) <= 0.38 * r) & (np.abs(dx) <= r)
    if kind == "vbar":
        return (np.abs(dx) <= 0.38 * r) & (np.abs(dy) <= r)
    raise ConfigurationError(f"unknown shape kind {kind!r}")


def _ellipse_mask(h: int, w: int, cy: float, cx: float, a: float, b: float,
                  theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _paint(image: np.ndarray, region: np.ndarray, color, rng) -> None:
    noise = rng.normal(0.0, 0.02, size=(3, int(region.sum())))
    for ch in range(3):
        image[ch][region] = np.clip(color[ch] + noise[ch], 0.0, 1.0)


def _background(rng, h: int, w: int) -> np.ndarray:
    coarse = rng.uniform(0.30, 0.62, size=(3, 8, 8))
    img = bilinear_resize_array(coarse, h, w).astype(np.float64)
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _palette_color(rng, preferred: int | None = None) -> np.ndarray:
    if preferred is not None and rng.random() < COLOR_PRIOR:
        idx = preferred
    else:
        idx = int(rng.integers(0, len(PALETTE)))
    base = PALETTE[idx]
    return np.clip(np.asarray(base) + rng.uniform(-0.08, 0.08, 3), 0, 1)


def render_sample(rng: np.random.Generator, h: int, w: int, c: int
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One (image, gt_mask, label) triple. The label is recomputed from the
    painted mask, so presence always matches visible pixels."""
    image = _background(rng, h, w)
    mask = np.zeros((h, w), dtype=np.uint8)
    scale = min(h, w) / 64.0

    for _ in range(int(rng.integers(1, 3))):
        a = rng.uniform(3.0, 5.5) * scale
        b = a * rng.uniform(2.0, 3.0)
        cy, cx = rng.uniform(6, h - 6), rng.uniform(6, w - 6)
        region = _ellipse_mask(h, w, cy, cx, a, b, rng.uniform(0, math.pi))
        _paint(image, region, _palette_color(rng), rng)

    n_cls = int(rng.integers(1, 3))
    classes = rng.choice(c, size=n_cls, replace=False) + 1
    for cls in classes:
        kind = SHAPE_KINDS[cls - 1]
        for attempt in range(12):
            r = rng.uniform(11.0, 18.0) * scale
            cy = rng.uniform(r + 1, h - r - 1)
            cx = rng.uniform(r + 1, w - r - 1)
            region = _shape_mask(kind, h, w, cy, cx, r)
            overlap = (mask > 0) & region
            if attempt == 11 or overlap.sum() <= 0.25 * region.sum():
                break
        _paint(image, region, _palette_color(rng, preferred=(cls - 1) % len(PALETTE)),
               rng)
        mask[region] = cls

    label = np.zeros(c, dtype=np.uint8)
    present = np.unique(mask)
    label[present[present > 0] - 1] = 1
    return image.astype(np.float32), mask, label


def generate_dataset(n_train: int, n_val: int, h: int, w: int, c: int,
                     seed: int, out_dir) -> Path:
    """Write a deterministic dataset tree and return the manifest path.

    Layout: out_dir/images/*.ppm, out_dir/masks/*.pgm, out_dir/manifest.csv
    with columns id,split,image_path,mask_path,label_bits.
    """
    if not 2 <= c <= 8:
        raise ConfigurationError(f"num classes must be in [2, 8], got {c}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    rows = []
    index = 0
    for split, count in (("train", n_train), ("val", n_val)):
        for _ in range(count):
            rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
            image, mask, label = render_sample(rng, h, w, c)
            sample_id = f"{split}_{index:05d}"
            img_rel = f"images/{sample_id}.ppm"
            mask_rel = f"masks/{sample_id}.pgm"
            write_ppm(out / img_rel, image)
            write_pgm(out / mask_rel, mask)
            rows.append((sample_id, split, img_rel, mask_rel,
                         "".join(str(int(b)) for b in label)))
            index += 1

    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "split", "image_path", "mask_path", "label_bits"])
        writer.writerows(rows)
    return manifest


def load_dataset(manifest_path, split: str | None = None) -> list[SynthSample]:
    manifest = Path(manifest_path)
    if manifest.is_dir():
        manifest = manifest / "manifest.csv"
    base = manifest.parent
    samples = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            if split is not None and row["split"] != split:
                continue
            label = np.frombuffer(row["label_bits"].encode(), dtype=np.uint8) - ord("0")
            samples.append(SynthSample(
                sample_id=row["id"], split=row["split"],
                image=read_ppm(base / row["image_path"]),
                label=label.astype(np.uint8),
                gt_mask=read_pgm(base / row["mask_path"]),
            ))
    if not samples:
        raise DataError(f"no samples for split={split!r} in {manifest}")
    return samples


# ----------------------------------------------------------------------
# spatial transforms (shared geometry for images and label maps)
# ----------------------------------------------------------------------


def _nearest_indices(out_size: int, in_size: int) -> np.ndarray:
    # same half-pixel convention as the bilinear path
    src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    return np.clip(np.round(src), 0, in_size - 1).astype(np.intp)


def _scaled_size(size: int, scale: float) -> int:
    return max(1, int(round(size * scale)))


def _crop_or_pad(arr: np.ndarray, out_h: int, out_w: int,
                 offset: tuple[int, int], fill) -> np.ndarray:
    """Trailing-2-axes crop (source offset) or pad (destination offset)."""
    dy, dx = offset
    h, w = arr.shape[-2], arr.shape[-1]
    out = np.full(arr.shape[:-2] + (out_h, out_w), fill, dtype=arr.dtype)
    src_y, dst_y = (dy, 0) if h >= out_h else (0, dy)
    src_x, dst_x = (dx, 0) if w >= out_w else (0, dx)
    ny, nx = min(h, out_h), min(w, out_w)
    out[..., dst_y:dst_y + ny, dst_x:dst_x + nx] = \
        arr[..., src_y:src_y + ny, src_x:src_x + nx]
    return out


def apply_spatial_image(image: np.ndarray, hflip: bool, scale: float,
                        offset: tuple[int, int], fill: float = 0.45) -> np.ndarray:
    """Bilinear spatial transform of (3,H,W); out-of-view pixels take `fill`."""
    _, h, w = image.shape
    if hflip:
        image = image[..., ::-1]
    hs, ws = _scaled_size(h, scale), _scaled_size(w, scale)
    if (hs, ws) != (h, w):
        image = bilinear_resize_array(np.ascontiguousarray(image), hs, ws)
    return _crop_or_pad(np.ascontiguousarray(image), h, w, offset,
                        np.asarray(fill, dtype=image.dtype))


def apply_spatial_labels(values: np.ndarray, hflip: bool, scale: float,
                         offset: tuple[int, int], fill) -> np.ndarray:
    """Nearest-neighbor spatial transform of a (H,W) label map or mask."""
    h, w = values.shape
    if hflip:
        values = values[:, ::-1]
    hs, ws = _scaled_size(h, scale), _scaled_size(w, scale)
    if (hs, ws) != (h, w):
        values = values[np.ix_(_nearest_indices(hs, h), _nearest_indices(ws, w))]
    return _crop_or_pad(values, h, w, offset, fill)


def _sample_offset(rng, src: int, dst: int) -> int:
    return int(rng.integers(0, abs(src - dst) + 1))


def replay_spatial(record: AugmentRecord, values: np.ndarray) -> np.ndarray:
    """Transport a pseudo-label map (uint8; fill 255) or boolean mask
    (fill False) through the spatial part of a recorded perturbation."""
    if values.dtype == bool:
        return apply_spatial_labels(values, record.hflip, record.scale_factor,
                                    record.crop_offset, False)
    return apply_spatial_labels(values, record.hflip, record.scale_factor,
                                record.crop_offset, np.uint8(IGNORE))


# ----------------------------------------------------------------------
# augmentation pipelines
# ----------------------------------------------------------------------


def weak_augment(sample: SynthSample, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Training-view augmentation: hflip, scale in [0.8, 1.25], crop/pad,
    mild color jitter. Label-preserving at image level: crops that would
    drop a present class are resampled (identity fallback after 20 tries).
    Returns (image, transported gt_mask)."""
    rng = np.random.default_rng(seed)
    hflip = bool(rng.random() < 0.5)
    h, w = sample.gt_mask.shape
    present = np.unique(sample.gt_mask[sample.gt_mask > 0])

    for _ in range(20):
        scale = float(rng.uniform(0.8, 1.25))
        hs, ws = _scaled_size(h, scale), _scaled_size(w, scale)
        offset = (_sample_offset(rng, hs, h), _sample_offset(rng, ws, w))
        mask_t = apply_spatial_labels(sample.gt_mask, hflip, scale, offset,
                                      np.uint8(IGNORE))
        kept = np.unique(mask_t[(mask_t > 0) & (mask_t != IGNORE)])
        if set(present) <= set(kept):
            break
    else:
        scale, offset = 1.0, (0, 0)
        mask_t = apply_spatial_labels(sample.gt_mask, hflip, scale, offset,
                                      np.uint8(IGNORE))

    image = apply_spatial_image(sample.image, hflip, scale, offset)
    gains = rng.uniform(0.9, 1.1, size=3)
    biases = rng.uniform(-0.05, 0.05, size=3)
    image = np.clip(image * gains[:, None, None] + biases[:, None, None],
                    0.0, 1.0).astype(np.float32)
    return image, mask_t


def strong_augment(image: np.ndarray, seed: int) -> tuple[np.ndarray, AugmentRecord]:
    """Perturbation branch: recorded hflip + scale in {0.75, 1.0, 1.25} +
    crop/pad, then color ops (per-channel gain/bias, optional grayscale)
    that are never applied to labels."""
    rng = np.random.default_rng(seed)
    _, h, w = image.shape
    hflip = bool(rng.random() < 0.5)
    scale = float(rng.choice([0.75, 1.0, 1.25]))
    hs, ws = _scaled_size(h, scale), _scaled_size(w, scale)
    offset = (_sample_offset(rng, hs, h), _sample_offset(rng, ws, w))
    gains = rng.uniform(0.6, 1.4, size=3)
    biases = rng.uniform(-0.2, 0.2, size=3)
    grayscale = bool(rng.random() < 0.2)

    out = apply_spatial_image(image, hflip, scale, offset)
    if grayscale:
        out = np.broadcast_to(out.mean(axis=0, keepdims=True), out.shape).copy()
    out = np.clip(out * gains[:, None, None] + biases[:, None, None],
                  0.0, 1.0).astype(np.float32)
    record = AugmentRecord(hflip=hflip, scale_factor=scale, crop_offset=offset,
                           gains=gains, biases=biases, grayscale=grayscale)
    return out, record
