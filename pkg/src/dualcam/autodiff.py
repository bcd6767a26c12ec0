"""Minimal reverse-mode autodiff over numpy arrays.

Provides exactly the primitives the dual-student training graph needs:
conv2d, relu, linear, global average pooling, bilinear resizing,
stop-gradient, elementwise arithmetic, scalar reductions, and three fused
loss ops (masked per-pixel softmax cross-entropy, multi-label soft margin,
and the batched -log(1 - cosine) feature-discrepancy term).

Graphs are reference-based: every op produces a `Node` linking the output
tensor to its inputs and a backward closure. `backward(loss)` topologically
sorts the reachable subgraph, propagates adjoints once per node, and then
consumes the graph; a second backward without a fresh forward is rejected.
Graphs are not shared between threads; independent forwards (e.g. the two
sub-nets) build independent graphs and may run concurrently.

Storage dtype follows the input arrays (float32 in training, float64 in
tests); reductions always accumulate in float64.
"""

from __future__ import annotations

import logging
import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, NumericError, UsageError

logger = logging.getLogger(__name__)

# Toggle for the finite-value invariant check after each primitive.
CHECK_FINITE = True

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (eval / label generation)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Node:
    """One recorded primitive op: inputs, and a closure mapping the output
    adjoint to input adjoints (aligned with `inputs`, None = no gradient)."""

    __slots__ = ("inputs", "fn", "consumed")

    def __init__(self, inputs: Sequence["Tensor"], fn: Callable):
        self.inputs = tuple(inputs)
        self.fn = fn
        self.consumed = False


class Tensor:
    """Dense array with optional gradient tracking.

    `requires_grad` marks leaves (parameters). Tensors produced by ops on
    tracked inputs carry a `_node` and receive transient adjoints during
    backward. `grad` always has the same shape as `data`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- arithmetic sugar used when combining loss scalars --------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def sum(self) -> "Tensor":
        return _reduce(self, np.sum)

    def mean(self) -> "Tensor":
        return _reduce(self, np.mean)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.data.shape
        out = _make(self.data.reshape(shape), (self,), check=False)
        if out._node is not None:
            out._node.fn = lambda g: (g.reshape(src_shape),)
        return out

    def backward(self):
        backward(self)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._node is not None


def _make(data: np.ndarray, inputs: Sequence[Tensor], check: bool = True) -> Tensor:
    """Wrap an op result; record a Node when grad mode is on and any input
    is tracked. The caller fills out._node.fn with the backward closure."""
    if check and CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError("non-finite values in op output")
    out = Tensor(data)
    if _grad_enabled and any(_tracked(t) for t in inputs):
        out._node = Node(inputs, fn=None)
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    # grads are never mutated in place, so storing a view is safe
    t.grad = g if t.grad is None else t.grad + g


def backward(loss: Tensor):
    """Reverse pass from a scalar: accumulates `.grad` on every tracked
    ancestor, visiting each recorded op exactly once, then consumes the
    graph (a second backward without a new forward raises UsageError)."""
    if loss.data.size != 1:
        raise UsageError("backward requires a scalar loss")
    if loss._node is None:
        raise UsageError("loss has no recorded graph (leaf tensor or grad disabled)")
    if loss._node.consumed:
        raise UsageError("graph already consumed by a previous backward")

    # Iterative topological sort over the reachable subgraph.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            if t._node.consumed:
                raise UsageError("graph already consumed by a previous backward")
            for inp in t._node.inputs:
                if id(inp) not in visited and inp._node is not None:
                    stack.append((inp, False))

    loss.grad = np.ones_like(loss.data)
    for t in reversed(order):
        node = t._node
        if node is None or t.grad is None:
            continue
        grads = node.fn(t.grad)
        for inp, g in zip(node.inputs, grads):
            if g is not None and _tracked(inp):
                _accumulate(inp, g)
        node.consumed = True
        node.fn = None
        node.inputs = ()
        if not t.requires_grad:
            t.grad = None


# ----------------------------------------------------------------------
# elementwise / reduction primitives
# ----------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    if b.data.shape not in ((), a.data.shape):
        raise ConfigurationError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = _make(a.data + b.data, (a, b))
    if out._node is not None:
        scalar_b = b.data.shape == ()
        out._node.fn = lambda g: (g, np.sum(g, dtype=np.float64) if scalar_b else g)
    return out


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    if b.data.shape not in ((), a.data.shape):
        raise ConfigurationError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = _make(a.data * b.data, (a, b))
    if out._node is not None:
        ad, bd = a.data, b.data
        scalar_b = bd.shape == ()
        def fn(g):
            ga = g * bd
            gb = np.sum(g * ad, dtype=np.float64) if scalar_b else g * ad
            return ga, gb
        out._node.fn = fn
    return out


def _reduce(x: Tensor, op) -> Tensor:
    val = op(x.data, dtype=np.float64)
    out = _make(np.asarray(val), (x,), check=True)
    if out._node is not None:
        n = x.data.size
        shape, dt = x.data.shape, x.data.dtype
        if op is np.sum:
            out._node.fn = lambda g: (np.broadcast_to(g.astype(dt), shape),)
        else:
            out._node.fn = lambda g: (np.broadcast_to((g / n).astype(dt), shape),)
    return out


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); subgradient at 0 is 0."""
    out = _make(np.maximum(x.data, 0), (x,))
    if out._node is not None:
        mask = x.data > 0
        out._node.fn = lambda g: (np.where(mask, g, 0),)
    return out


def stop_gradient(x: Tensor) -> Tensor:
    """Value-identical tensor detached from the graph: ancestors of x get a
    zero adjoint through this tensor."""
    out = Tensor(x.data)
    return out


# ----------------------------------------------------------------------
# network primitives
# ----------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x (N,D) -> x @ W.T + b with W (C,D), b (C,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[1]:
        raise ConfigurationError(
            f"linear shape mismatch: x {x.shape} vs weight {weight.shape}")
    if bias.data.shape != (weight.data.shape[0],):
        raise ConfigurationError(f"linear bias shape {bias.shape} != ({weight.shape[0]},)")
    out = _make(x.data @ weight.data.T + bias.data, (x, weight, bias))
    if out._node is not None:
        xd, wd = x.data, weight.data
        def fn(g):
            return g @ wd, g.T @ xd, np.sum(g, axis=0, dtype=np.float64)
        out._node.fn = fn
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) mean over the spatial dims (float64 accumulation)."""
    if x.data.ndim != 4:
        raise ConfigurationError(f"global_avg_pool expects N,C,H,W; got {x.shape}")
    n, c, h, w = x.data.shape
    val = np.mean(x.data, axis=(2, 3), dtype=np.float64).astype(x.data.dtype)
    out = _make(val, (x,))
    if out._node is not None:
        def fn(g):
            return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)),)
        out._node.fn = fn
    return out


def _conv_out_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int,
            out_h: int, out_w: int) -> np.ndarray:
    """(N,C,Hp,Wp) padded input -> contiguous (N, C*k*k, out_h*out_w)."""
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, k, k, out_h, out_w),
        strides=(s0, s1, s2 * dilation, s3 * dilation, s2 * stride, s3 * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(n, c * k * k, out_h * out_w)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation: x (N,Cin,H,W), weight (Cout,Cin,k,k), bias (Cout,).

    Odd square kernels only; gradients w.r.t. input, weight, and bias.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ConfigurationError("conv2d expects 4-D input and weight")
    n, cin, h, w = x.data.shape
    cout, cin_w, kh, kw = weight.data.shape
    if cin != cin_w or kh != kw:
        raise ConfigurationError(
            f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    if kh % 2 == 0:
        raise ConfigurationError("conv2d kernel size must be odd")
    if bias.data.shape != (cout,):
        raise ConfigurationError(f"conv2d bias shape {bias.shape} != ({cout},)")
    out_h = _conv_out_size(h, kh, stride, padding, dilation)
    out_w = _conv_out_size(w, kw, stride, padding, dilation)
    if out_h < 1 or out_w < 1:
        raise ConfigurationError("conv2d output would be empty")

    if padding > 0:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, stride, dilation, out_h, out_w)   # (N, Cin*k*k, L)
    w2 = weight.data.reshape(cout, -1)                        # (Cout, Cin*k*k)
    val = (np.matmul(w2, cols) + bias.data[None, :, None]).reshape(n, cout, out_h, out_w)
    out = _make(val, (x, weight, bias))

    if out._node is not None:
        pad_h, pad_w = h + 2 * padding, w + 2 * padding

        def fn(g):
            gflat = g.reshape(n, cout, -1)                    # (N, Cout, L)
            g_bias = np.sum(gflat, axis=(0, 2), dtype=np.float64)
            g_w = np.matmul(gflat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.data.shape)
            gcols = np.matmul(w2.T, gflat)                    # (N, Cin*k*k, L)
            gcols = gcols.reshape(n, cin, kh, kw, out_h, out_w)
            gx_pad = np.zeros((n, cin, pad_h, pad_w), dtype=g.dtype)
            for ki in range(kh):
                ri = ki * dilation
                for kj in range(kw):
                    cj = kj * dilation
                    gx_pad[:, :, ri:ri + stride * out_h:stride,
                           cj:cj + stride * out_w:stride] += gcols[:, :, ki, kj]
            if padding > 0:
                gx = gx_pad[:, :, padding:padding + h, padding:padding + w]
            else:
                gx = gx_pad
            return gx, g_w, g_bias

        out._node.fn = fn
    return out


_RESIZE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _resize_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Dense (out, in) interpolation matrix for 1-D bilinear resampling,
    half-pixel convention: src = (dst + 0.5) * in/out - 0.5, edge-clamped."""
    key = (in_size, out_size)
    mat = _RESIZE_CACHE.get(key)
    if mat is not None:
        return mat
    mat = np.zeros((out_size, in_size), dtype=np.float64)
    scale = in_size / out_size
    for o in range(out_size):
        src = (o + 0.5) * scale - 0.5
        i0 = math.floor(src)
        frac = src - i0
        i0c = min(max(i0, 0), in_size - 1)
        i1c = min(max(i0 + 1, 0), in_size - 1)
        mat[o, i0c] += 1.0 - frac
        mat[o, i1c] += frac
    _RESIZE_CACHE[key] = mat
    return mat


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """(N,C,H,W) -> (N,C,out_h,out_w), half-pixel bilinear interpolation."""
    if x.data.ndim != 4:
        raise ConfigurationError(f"bilinear_resize expects N,C,H,W; got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ConfigurationError("bilinear_resize output size must be >= 1")
    val = bilinear_resize_array(x.data, out_h, out_w)
    out = _make(val, (x,))
    if out._node is not None:
        ah = _resize_matrix(x.data.shape[2], out_h).astype(x.data.dtype)
        aw = _resize_matrix(x.data.shape[3], out_w).astype(x.data.dtype)
        def fn(g):
            # adjoint of the separable linear map: A_h^T g A_w
            tmp = np.einsum("oh,ncow->nchw", ah, g, optimize=True)
            return (np.einsum("pw,nchp->nchw", aw, tmp, optimize=True),)
        out._node.fn = fn
    return out


def bilinear_resize_array(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Non-differentiable bilinear resize of the trailing two axes."""
    in_h, in_w = x.shape[-2], x.shape[-1]
    if (in_h, in_w) == (out_h, out_w):
        return x.copy()
    ah = _resize_matrix(in_h, out_h).astype(x.dtype)
    aw = _resize_matrix(in_w, out_w).astype(x.dtype)
    tmp = np.einsum("oh,...hw->...ow", ah, x, optimize=True)
    return np.einsum("pw,...ow->...op", aw, tmp, optimize=True)


# ----------------------------------------------------------------------
# fused loss primitives
# ----------------------------------------------------------------------


def log_softmax_array(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    """Numerically stable log-softmax (plain numpy, no graph)."""
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def masked_softmax_ce(logits: Tensor, target: np.ndarray,
                      include: np.ndarray) -> Tensor:
    """Per-pixel softmax cross-entropy in nats, restricted to `include`.

    logits (N,K,H,W); target (N,H,W) ints in [0,K) at included pixels;
    include (N,H,W) bool. Per image the included losses are averaged (an
    image with no included pixel contributes 0), then the batch is averaged.
    Excluded pixels receive exactly zero gradient.
    """
    n, k = logits.data.shape[0], logits.data.shape[1]
    if target.shape != (n,) + logits.data.shape[2:] or include.shape != target.shape:
        raise ConfigurationError(
            f"masked_softmax_ce shapes: logits {logits.shape}, target {target.shape}, "
            f"include {include.shape}")
    tgt = np.where(include, target, 0).astype(np.int64)
    if include.any() and (tgt[include].min() < 0 or tgt[include].max() >= k):
        raise ConfigurationError("target labels out of range for logits channels")

    logp = log_softmax_array(logits.data, axis=1)
    ce = -np.take_along_axis(logp, tgt[:, None], axis=1)[:, 0]    # (N,H,W)
    counts = include.reshape(n, -1).sum(axis=1)
    sums = np.where(include, ce, 0).reshape(n, -1).sum(axis=1, dtype=np.float64)
    per_image = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    out = _make(np.asarray(per_image.mean(dtype=np.float64)), (logits,), check=True)

    if out._node is not None:
        def fn(g):
            p = np.exp(logp)
            np.put_along_axis(p, tgt[:, None],
                              np.take_along_axis(p, tgt[:, None], axis=1) - 1.0, axis=1)
            scale = np.where(counts > 0, 1.0 / (np.maximum(counts, 1) * n), 0.0)
            wmap = (include * scale[:, None, None]).astype(logits.data.dtype)
            return ((float(g) * p * wmap[:, None]).astype(logits.data.dtype),)
        out._node.fn = fn
    return out


def multilabel_soft_margin(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over batch and classes of -[y log sigma(z) + (1-y) log(1-sigma(z))],
    computed in log-space via softplus. logits (N,C), targets binary (N,C)."""
    z, y = logits.data, targets
    if z.shape != y.shape:
        raise ConfigurationError(f"multilabel_soft_margin shapes: {z.shape} vs {y.shape}")
    softplus_pos = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))    # softplus(z)
    loss = y * (softplus_pos - z) + (1 - y) * softplus_pos            # softplus(-z) = softplus(z) - z
    out = _make(np.asarray(np.mean(loss, dtype=np.float64)), (logits,), check=True)
    if out._node is not None:
        def fn(g):
            sig = 1.0 / (1.0 + np.exp(-z))
            return ((float(g) * (sig - y) / z.size).astype(z.dtype),)
        out._node.fn = fn
    return out


def neg_log_one_minus_cosine(a: Tensor, b: Tensor, eps: float = 1e-4) -> Tensor:
    """Batch mean of -log(1 - cos(a_i, b_i)) over row vectors.

    a, b: (N,K). The cosine is clamped to [-1, 1-eps] so identical inputs
    give a finite ceiling; rows with a zero-norm operand use similarity 0
    (orthogonal convention, logged). Clamped rows get zero gradient.
    """
    if a.data.shape != b.data.shape or a.data.ndim != 2:
        raise ConfigurationError(f"discrepancy shapes: {a.shape} vs {b.shape}")
    ad = a.data.astype(np.float64, copy=False)
    bd = b.data.astype(np.float64, copy=False)
    dots = np.einsum("nk,nk->n", ad, bd)
    na = np.sqrt(np.einsum("nk,nk->n", ad, ad))
    nb = np.sqrt(np.einsum("nk,nk->n", bd, bd))
    denom = na * nb
    nonzero = denom > 0
    if not np.all(nonzero):
        logger.warning("zero-norm feature vector in discrepancy loss; using similarity 0")
    s_raw = np.where(nonzero, dots / np.where(nonzero, denom, 1.0), 0.0)
    s = np.clip(s_raw, -1.0, 1.0 - eps)
    val = -np.log(1.0 - s)
    out = _make(np.asarray(val.mean(dtype=np.float64)), (a, b), check=True)

    if out._node is not None:
        n = a.data.shape[0]
        live = nonzero & (s_raw > -1.0) & (s_raw < 1.0 - eps)
        def fn(g):
            coef = np.where(live, 1.0 / (1.0 - s) / n, 0.0) * float(g)
            ga = coef[:, None] * (bd / np.where(nonzero, denom, 1.0)[:, None]
                                  - s[:, None] * ad / np.where(nonzero, na * na, 1.0)[:, None])
            gb = coef[:, None] * (ad / np.where(nonzero, denom, 1.0)[:, None]
                                  - s[:, None] * bd / np.where(nonzero, nb * nb, 1.0)[:, None])
            return ga.astype(a.data.dtype), gb.astype(b.data.dtype)
        out._node.fn = fn
    return out
