"""Student sub-networks: conv backbone, linear classifier, dilated seg head.

Each `SubNet` owns its parameters outright; the `DualStudent` container
pairs two architecturally identical sub-nets whose parameters are never
aliased. The classifier weight tensor is the single source of truth for
CAM weighting downstream.
"""

from __future__ import annotations

import struct
from typing import Optional

import numpy as np

from .autodiff import Tensor, bilinear_resize, conv2d, global_avg_pool, linear, relu
from .errors import ConfigurationError

CHECKPOINT_MAGIC = b"DUPL"
CHECKPOINT_VERSION = 1


class SubNet:
    """Backbone (stack of stride-reducing 3x3 conv blocks) + C-way classifier
    + segmentation head (two 3x3 dilated convs and a 1x1 prediction conv to
    C+1 channels, background explicit)."""

    def __init__(self, num_classes: int, in_channels: int = 3,
                 widths: tuple[int, ...] = (32, 64, 96, 128),
                 strides: tuple[int, ...] = (2, 2, 1, 1),
                 head_dilation: int = 5, dtype=np.float32):
        if len(widths) != len(strides):
            raise ConfigurationError("widths and strides must have equal length")
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.strides = tuple(strides)
        self.head_dilation = head_dilation
        self.dtype = np.dtype(dtype)
        self.stride = int(np.prod(strides))
        self.feature_dim = widths[-1]

        self.params: dict[str, Tensor] = {}
        prev = in_channels
        for i, width in enumerate(widths):
            self._add(f"backbone.conv{i}.weight", (width, prev, 3, 3))
            self._add(f"backbone.conv{i}.bias", (width,))
            prev = width
        self._add("classifier.weight", (num_classes, self.feature_dim))
        self._add("classifier.bias", (num_classes,))
        for i in range(2):
            self._add(f"seg_head.conv{i}.weight", (self.feature_dim, self.feature_dim, 3, 3))
            self._add(f"seg_head.conv{i}.bias", (self.feature_dim,))
        self._add("seg_head.pred.weight", (num_classes + 1, self.feature_dim, 1, 1))
        self._add("seg_head.pred.bias", (num_classes + 1,))

    def _add(self, name: str, shape: tuple[int, ...]):
        self.params[name] = Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)

    @property
    def classifier_weight(self) -> Tensor:
        return self.params["classifier.weight"]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def init_params(self, seed: int) -> "SubNet":
        """Kaiming-style fan-in uniform init (variance 2/fan_in), zero biases.

        Deterministic given the seed; draws follow parameter construction
        order.
        """
        rng = np.random.default_rng(seed)
        for name, p in self.params.items():
            if name.endswith(".bias"):
                p.data[...] = 0.0
                continue
            shape = p.data.shape
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            p.data[...] = rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        return self

    def forward(self, images: Tensor, with_seg: bool = True
                ) -> tuple[Tensor, Tensor, Optional[Tensor]]:
        """images (N,3,H,W) -> (features (N,D,H/s,W/s), class_logits (N,C),
        seg_logits (N,C+1,H,W) resized to image resolution, or None)."""
        n, c, h, w = images.data.shape
        if c != self.in_channels:
            raise ConfigurationError(f"expected {self.in_channels} input channels, got {c}")
        if h % self.stride or w % self.stride:
            raise ConfigurationError(
                f"image size {h}x{w} not divisible by backbone stride {self.stride}")

        feat = images
        for i, s in enumerate(self.strides):
            feat = relu(conv2d(feat, self.params[f"backbone.conv{i}.weight"],
                               self.params[f"backbone.conv{i}.bias"],
                               stride=s, padding=1))
        class_logits = linear(global_avg_pool(feat),
                              self.params["classifier.weight"],
                              self.params["classifier.bias"])
        seg_logits = None
        if with_seg:
            d = self.head_dilation
            x = feat
            for i in range(2):
                x = relu(conv2d(x, self.params[f"seg_head.conv{i}.weight"],
                                self.params[f"seg_head.conv{i}.bias"],
                                padding=d, dilation=d))
            low = conv2d(x, self.params["seg_head.pred.weight"],
                         self.params["seg_head.pred.bias"])
            seg_logits = bilinear_resize(low, h, w)
        return feat, class_logits, seg_logits

    def clone_arch(self) -> "SubNet":
        return SubNet(self.num_classes, self.in_channels, self.widths,
                      self.strides, self.head_dilation, self.dtype)


class DualStudent:
    """Two independently parameterized sub-nets (net2 is None when running
    the single-student baseline)."""

    def __init__(self, net1: SubNet, net2: Optional[SubNet]):
        if net2 is not None:
            shared = set(id(p) for p in net1.parameters()) & set(
                id(p) for p in net2.parameters())
            if shared:
                raise ConfigurationError("sub-nets must not share parameter tensors")
        self.net1 = net1
        self.net2 = net2

    @classmethod
    def create(cls, num_classes: int, seed: int, dual: bool = True,
               **arch_kwargs) -> "DualStudent":
        """Build one or two sub-nets with distinct per-sub-net init seeds."""
        net1 = SubNet(num_classes, **arch_kwargs).init_params(seed * 2 + 1)
        net2 = None
        if dual:
            net2 = SubNet(num_classes, **arch_kwargs).init_params(seed * 2 + 2)
        return cls(net1, net2)

    @property
    def subnets(self) -> list[SubNet]:
        return [self.net1] if self.net2 is None else [self.net1, self.net2]

    def named_params(self) -> list[tuple[str, Tensor]]:
        items = [(f"net1.{k}", v) for k, v in self.net1.params.items()]
        if self.net2 is not None:
            items += [(f"net2.{k}", v) for k, v in self.net2.params.items()]
        return items

    def save_checkpoint(self, path):
        """Flat binary: magic, version u32, param count u32, then per
        parameter: u32 name length, name bytes, u32 rank, u32 extents,
        float32 little-endian values. Both sub-nets in one file."""
        items = self.named_params()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(items)))
            for name, p in items:
                raw = name.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                shape = p.data.shape
                fh.write(struct.pack("<I", len(shape)))
                fh.write(struct.pack(f"<{len(shape)}I", *shape))
                fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())

    def load_checkpoint(self, path):
        """Load values by name into this model; shape or name mismatches
        raise ConfigurationError."""
        stored = read_checkpoint(path)
        expected = dict(self.named_params())
        if set(stored) != set(expected):
            missing = sorted(set(expected) - set(stored))
            extra = sorted(set(stored) - set(expected))
            raise ConfigurationError(
                f"checkpoint does not match model (missing={missing[:3]}, extra={extra[:3]})")
        for name, arr in stored.items():
            p = expected[name]
            if arr.shape != p.data.shape:
                raise ConfigurationError(
                    f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.data.shape}")
            p.data[...] = arr.astype(p.data.dtype)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    """Parse the checkpoint container into a name -> float32 array dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ConfigurationError("bad checkpoint magic")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        out[name] = arr.copy()
    return out
