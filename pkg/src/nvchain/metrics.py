"""Concordance correlation coefficient and the batch training loss.

All moments are population moments (divide by n).  When the denominator
``var_s + var_t + (mean_s - mean_t)**2`` is exactly zero, CCC is defined as 0.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class CccStats:
    n: int
    mean_s: float
    mean_t: float
    var_s: float
    var_t: float
    cov_st: float

    @property
    def denominator(self):
        return self.var_s + self.var_t + (self.mean_s - self.mean_t) ** 2

    @property
    def ccc(self):
        den = self.denominator
        if den == 0.0:
            return 0.0
        # rounding can push |2 cov / den| an ulp past 1
        return min(1.0, max(-1.0, 2.0 * self.cov_st / den))


def _mean(x):
    # a constant column has that constant as its exact mean; np.mean can be off by an ulp
    m = x.mean(axis=0)
    return np.where(np.all(x == x[0], axis=0), x[0], m)


def ccc_stats(s, t):
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if s.ndim != 1 or s.shape != t.shape:
        raise InputError(f"ccc needs two vectors of equal length, got {s.shape} and {t.shape}")
    if s.size < 2:
        raise InputError(f"ccc needs at least 2 values, got {s.size}")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(t))):
        raise InputError("ccc input contains NaN or Inf")
    ms, mt = _mean(s), _mean(t)
    ds, dt = s - ms, t - mt
    return CccStats(
        n=s.size,
        mean_s=float(ms),
        mean_t=float(mt),
        var_s=float(np.mean(ds * ds)),
        var_t=float(np.mean(dt * dt)),
        cov_st=float(np.mean(ds * dt)),
    )


def ccc(s, t):
    """Lin's concordance correlation coefficient between ``s`` and ``t``."""
    return ccc_stats(s, t).ccc


def _check_pair(Y, Y_hat):
    Y = np.asarray(Y, dtype=np.float64)
    Y_hat = np.asarray(Y_hat, dtype=np.float64)
    if Y.ndim != 2 or Y.shape != Y_hat.shape:
        raise InputError(f"shape mismatch: targets {Y.shape} vs predictions {Y_hat.shape}")
    return Y, Y_hat


def per_emotion_ccc(Y, Y_hat):
    """Column-wise CCC between predictions and targets, shape ``[C]``."""
    Y, Y_hat = _check_pair(Y, Y_hat)
    return np.array([ccc(Y_hat[:, i], Y[:, i]) for i in range(Y.shape[1])])


def mean_ccc_loss(Y, Y_hat):
    """Negated mean CCC over columns and its gradient w.r.t. ``Y_hat``.

    Returns ``(loss, grad)`` with ``grad`` shaped like ``Y_hat``.
    """
    Y, Y_hat = _check_pair(Y, Y_hat)
    B, C = Y.shape
    if B < 2:
        raise ConfigError(f"CCC loss needs a batch of at least 2 samples, got {B}")
    if C < 1:
        raise InputError("CCC loss needs at least one column")
    if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(Y_hat))):
        raise InputError("CCC loss input contains NaN or Inf")

    ms = _mean(Y_hat)
    mt = _mean(Y)
    ds = Y_hat - ms
    dt = Y - mt
    var_s = np.mean(ds * ds, axis=0)
    var_t = np.mean(dt * dt, axis=0)
    cov = np.mean(ds * dt, axis=0)
    den = var_s + var_t + (ms - mt) ** 2

    live = den != 0.0
    safe = np.where(live, den, 1.0)
    col_ccc = np.where(live, 2.0 * cov / safe, 0.0)
    # d ccc / d s_j = (2/den) dt_j / B - (2 cov / den^2) * 2 (ds_j + ms - mt) / B
    grad_ccc = (2.0 / safe) * dt / B - (2.0 * cov / safe**2) * 2.0 * (ds + (ms - mt)) / B
    grad_ccc = np.where(live, grad_ccc, 0.0)

    loss = -float(col_ccc.mean())
    return loss, -grad_ccc / C


def mse_loss(Y, Y_hat):
    """Mean squared error and its gradient; the fallback for degenerate batches."""
    Y, Y_hat = _check_pair(Y, Y_hat)
    diff = Y_hat - Y
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size
