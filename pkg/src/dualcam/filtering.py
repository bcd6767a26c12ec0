"""Trustworthy progressive learning: threshold schedule and noise filtering.

The foreground threshold decays along a half-cosine from its start to its
end value across training. Noise filtering fits a 2-component 1-D Gaussian
mixture to the per-pixel cross-entropy of a prediction against its
supervising pseudo-labels (EM, percentile init); pixels whose posterior
probability under the high-loss component exceeds gamma are excluded from
supervision, unless the component means are closer than eta, in which case
the whole image counts as clean.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import log_softmax_array
from .cam import IGNORE
from .errors import ConfigurationError

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ThresholdSchedule:
    """Cosine descent of the foreground threshold tau_h over total_iters."""

    tau_h_start: float
    tau_h_end: float
    total_iters: int
    tau_l: float

    def __post_init__(self):
        if not (self.tau_l < self.tau_h_end <= self.tau_h_start <= 1.0):
            raise ConfigurationError(
                f"need tau_l < tau_h_end <= tau_h_start <= 1, got "
                f"({self.tau_l}, {self.tau_h_end}, {self.tau_h_start})")
        if self.total_iters < 1:
            raise ConfigurationError("total_iters must be >= 1")

    def tau_h_at(self, t: int) -> float:
        """tau_h(t) = tau_h(0) - (tau_h(0) - tau_h(T)) * (1 - cos(t*pi/T)) / 2.

        t outside [0, T] is clamped to the endpoint with a warning.
        """
        if t < 0 or t > self.total_iters:
            logger.warning("tau_h_at: t=%d outside [0, %d], clamping", t, self.total_iters)
            t = min(max(t, 0), self.total_iters)
        frac = 1.0 - math.cos(t * math.pi / self.total_iters)
        return self.tau_h_start - 0.5 * (self.tau_h_start - self.tau_h_end) * frac


def tau_h_at(schedule: ThresholdSchedule, t: int) -> float:
    return schedule.tau_h_at(t)


@dataclass
class NoiseFilterConfig:
    gamma: float = 0.9            # posterior threshold for the noisy component
    eta: float = 1.0              # minimum mean separation, in nats
    min_valid_pixels: int = 64
    max_em_iters: int = 50
    em_tol: float = 1e-4
    variance_floor: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError(f"gamma must be in (0,1), got {self.gamma}")
        if self.eta < 0.0:
            raise ConfigurationError(f"eta must be >= 0, got {self.eta}")


@dataclass
class GmmFit:
    """Two 1-D Gaussians over per-pixel losses; by convention mu_n >= mu_c."""

    w_c: float
    mu_c: float
    sigma_c: float
    w_n: float
    mu_n: float
    sigma_n: float
    log_likelihood: float
    converged: bool
    n_samples: int
    ll_trace: list = field(default_factory=list, repr=False)


def pixel_loss_map(seg_logits: np.ndarray, labels: np.ndarray
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel cross-entropy (nats) of logits (K,H,W) against labels (H,W).

    Ignore pixels (255) are marked invalid and carry loss 0. Plain numpy;
    this map feeds EM, not backprop.
    """
    if seg_logits.shape[1:] != labels.shape:
        raise ConfigurationError(
            f"pixel_loss_map shapes: logits {seg_logits.shape} vs labels {labels.shape}")
    valid = labels != IGNORE
    tgt = np.where(valid, labels, 0).astype(np.int64)
    logp = log_softmax_array(seg_logits.astype(np.float64), axis=0)
    ce = -np.take_along_axis(logp, tgt[None], axis=0)[0]
    return np.where(valid, ce, 0.0), valid


def _log_gauss(x: np.ndarray, mu: float, sigma: float) -> np.ndarray:
    z = (x - mu) / sigma
    return -0.5 * z * z - math.log(sigma) - 0.5 * _LOG_2PI


def fit_gmm_1d(losses: np.ndarray, cfg: NoiseFilterConfig) -> GmmFit:
    """EM for a 2-component 1-D mixture.

    Init: means at the 25th/75th percentiles, both variances at the overall
    variance (floored), weights 0.5/0.5. Iterates E/M until the
    log-likelihood change drops below em_tol or max_em_iters is hit, then
    relabels so the noisy component has the larger mean. Identical losses
    give a degenerate converged fit with zero separation.
    """
    x = np.asarray(losses, dtype=np.float64).ravel()
    if x.size < 2:
        raise ConfigurationError("fit_gmm_1d needs at least 2 samples")
    mu = np.percentile(x, [25.0, 75.0])
    var0 = max(float(np.var(x)), cfg.variance_floor)
    var = np.array([var0, var0])
    w = np.array([0.5, 0.5])

    ll_prev = -np.inf
    ll = ll_prev
    trace: list[float] = []
    converged = False
    for _ in range(cfg.max_em_iters):
        # E-step in log-space
        log_comp = np.stack([
            np.log(np.maximum(w[k], 1e-300)) + _log_gauss(x, mu[k], math.sqrt(var[k]))
            for k in range(2)
        ])                                            # (2, n)
        m = log_comp.max(axis=0)
        lse = m + np.log(np.exp(log_comp - m).sum(axis=0))
        ll = float(lse.sum())
        trace.append(ll)
        if abs(ll - ll_prev) < cfg.em_tol:
            converged = True
            break
        ll_prev = ll
        resp = np.exp(log_comp - lse)                 # (2, n)
        # M-step
        nk = resp.sum(axis=1)
        for k in range(2):
            if nk[k] < 1e-12:
                continue                              # keep the starved component
            w[k] = nk[k] / x.size
            mu[k] = float(resp[k] @ x) / nk[k]
            var[k] = max(float(resp[k] @ np.square(x - mu[k])) / nk[k],
                         cfg.variance_floor)
        w = w / w.sum()

    clean, noisy = (0, 1) if mu[0] <= mu[1] else (1, 0)
    return GmmFit(
        w_c=float(w[clean]), mu_c=float(mu[clean]), sigma_c=math.sqrt(var[clean]),
        w_n=float(w[noisy]), mu_n=float(mu[noisy]), sigma_n=math.sqrt(var[noisy]),
        log_likelihood=ll, converged=converged, n_samples=int(x.size),
        ll_trace=trace,
    )


def noise_posterior(fit: GmmFit, loss) -> np.ndarray:
    """Posterior probability that a loss value came from the noisy component,
    computed in log-space."""
    x = np.asarray(loss, dtype=np.float64)
    log_c = np.log(max(fit.w_c, 1e-300)) + _log_gauss(x, fit.mu_c, fit.sigma_c)
    log_n = np.log(max(fit.w_n, 1e-300)) + _log_gauss(x, fit.mu_n, fit.sigma_n)
    diff = log_c - log_n
    out = np.empty_like(diff)
    pos = diff >= 0
    out[pos] = np.exp(-diff[pos]) / (1.0 + np.exp(-diff[pos]))
    out[~pos] = 1.0 / (1.0 + np.exp(diff[~pos]))
    return out


def adaptive_noise_filter(loss_map: np.ndarray, valid: np.ndarray,
                          cfg: NoiseFilterConfig
                          ) -> tuple[np.ndarray, Optional[GmmFit]]:
    """Per-image noise mask over a pixel loss map.

    Returns (mask, fit): mask is True where the pixel's pseudo-label is
    filtered. All-clean (empty mask) when there are fewer than
    min_valid_pixels valid pixels or the fitted means are within eta.
    """
    mask = np.zeros(loss_map.shape, dtype=bool)
    vals = loss_map[valid]
    if vals.size < cfg.min_valid_pixels:
        return mask, None
    fit = fit_gmm_1d(vals, cfg)
    if fit.mu_n - fit.mu_c <= cfg.eta:
        return mask, fit
    post = noise_posterior(fit, loss_map)
    mask[valid & (post > cfg.gamma)] = True
    return mask, fit
