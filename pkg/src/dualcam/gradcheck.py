"""Central finite-difference gradient oracle.

Used by the test suite and the `gradcheck` CLI subcommand: for a scalar-
valued function of Tensors, compares the analytic adjoints produced by the
reverse pass against central differences evaluated in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward, no_grad


@dataclass
class GradcheckResult:
    fraction_within_tol: float      # coords with rel. err < tol
    max_rel_err: float
    n_checked: int

    def ok(self, tol_fraction: float = 0.95, hard_max: float = 1e-2) -> bool:
        return self.fraction_within_tol >= tol_fraction and self.max_rel_err < hard_max


def numerical_gradient(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray],
                       which: int, coords: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of fn w.r.t. flat coordinates of arrays[which]."""
    base = [a.astype(np.float64).copy() for a in arrays]
    out = np.empty(len(coords), dtype=np.float64)
    flat = base[which].reshape(-1)
    with no_grad():
        for j, idx in enumerate(coords):
            orig = flat[idx]
            flat[idx] = orig + h
            f_plus = fn(*[Tensor(a) for a in base]).item()
            flat[idx] = orig - h
            f_minus = fn(*[Tensor(a) for a in base]).item()
            flat[idx] = orig
            out[j] = (f_plus - f_minus) / (2.0 * h)
    return out


def gradcheck(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray],
              rel_tol: float = 1e-3, h: float = 1e-4,
              max_coords_per_input: int = 60, seed: int = 0) -> GradcheckResult:
    """Check every input's analytic gradient against central differences.

    `fn` maps Tensors to a scalar Tensor. Relative error is
    |a - n| / max(|a|, |n|, 1e-6); coordinates are sampled uniformly when an
    input has more than `max_coords_per_input` entries.
    """
    inputs = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    loss = fn(*inputs)
    backward(loss)

    rng = np.random.default_rng(seed)
    errs = []
    for i, t in enumerate(inputs):
        analytic = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
        n = t.data.size
        if n <= max_coords_per_input:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_input, replace=False)
        numeric = numerical_gradient(fn, [x.data for x in inputs], i, coords, h=h)
        denom = np.maximum(np.maximum(np.abs(analytic[coords]), np.abs(numeric)), 1e-6)
        errs.append(np.abs(analytic[coords] - numeric) / denom)
    all_errs = np.concatenate(errs)
    return GradcheckResult(
        fraction_within_tol=float(np.mean(all_errs < rel_tol)),
        max_rel_err=float(all_errs.max()) if all_errs.size else 0.0,
        n_checked=int(all_errs.size),
    )
