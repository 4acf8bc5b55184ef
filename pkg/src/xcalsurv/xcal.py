"""Differentiable D-calibration.

Soft bin membership replaces the hard indicator of D-calibration; the
per-minibatch value of soft D-calibration is an upper bound (in expectation
over batches) on the full-data value and is what training penalizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import BinScheme

EPS_CENS = 1e-6


@dataclass(frozen=True)
class SoftConfig:
    gamma: float = 1e4
    bins: BinScheme = field(default_factory=BinScheme.equal)

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")


@dataclass(frozen=True)
class CdfBatch:
    values: np.ndarray
    events: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        e = np.asarray(self.events, dtype=bool)
        if v.ndim != 1 or e.shape != v.shape:
            raise ValueError("values and events must be matching 1-d arrays")
        if np.any((v < 0) | (v > 1)):
            raise ValueError("CDF values must lie in [0, 1]")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "events", e)

    @classmethod
    def uncensored(cls, values) -> "CdfBatch":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.ones(values.shape, dtype=bool))

    def __len__(self):
        return len(self.values)


def zeta(u, a, b, gamma):
    """Soft membership ``sigmoid(gamma (u - a)(b - u))`` of ``u`` in ``[a, b]``."""
    u = np.asarray(u, dtype=np.float64)
    return expit(gamma * (u - a) * (b - u))


def _soft_edges(bins: BinScheme, extend: bool):
    if extend:
        return bins.soft_lower, bins.soft_upper
    return bins.lower, bins.upper


def zeta_cens(f_u, a, b, gamma, a_soft=None, b_soft=None):
    """Soft expected bin mass of a point censored where the CDF equals ``f_u``.

    The true edges ``a, b`` enter the mass weights; ``a_soft, b_soft``
    (default: the true edges) enter the soft indicators, which is where the
    boundary extensions apply.
    """
    a_soft = a if a_soft is None else a_soft
    b_soft = b if b_soft is None else b_soft
    f = np.minimum(np.asarray(f_u, dtype=np.float64), 1.0 - EPS_CENS)
    inside = expit(gamma * (f - a_soft) * (b_soft - f))
    below = expit(gamma * (a_soft - f))
    return ((b - f) * inside + (b - a) * below) / (1.0 - f)


def membership(batch: CdfBatch, cfg: SoftConfig, extend: bool = True, with_grad: bool = False):
    """Per-point soft contributions ``(n, B)`` and optionally ``d/dF``.

    Uncensored points use ``zeta``; censored points ``zeta_cens`` with the
    CDF clamped below ``1 - EPS_CENS`` (zero derivative where clamped).
    """
    bins, gamma = cfg.bins, cfg.gamma
    a, b = bins.lower[None, :], bins.upper[None, :]
    a_s, b_s = (e[None, :] for e in _soft_edges(bins, extend))
    f = batch.values[:, None]
    ev = batch.events[:, None]

    inside_arg = gamma * (f - a_s) * (b_s - f)
    s_in = expit(inside_arg)
    z_unc = s_in

    clamped = f >= 1.0 - EPS_CENS
    fc = np.minimum(f, 1.0 - EPS_CENS)
    s_in_c = expit(gamma * (fc - a_s) * (b_s - fc))
    s_below = expit(gamma * (a_s - fc))
    denom = 1.0 - fc
    num = (b - fc) * s_in_c + (b - a) * s_below
    z_cens = num / denom
    contrib = np.where(ev, z_unc, z_cens)
    if not with_grad:
        return contrib
    d_unc = s_in * (1.0 - s_in) * gamma * (a_s + b_s - 2.0 * f)
    d_num = (-s_in_c + (b - fc) * s_in_c * (1.0 - s_in_c) * gamma * (a_s + b_s - 2.0 * fc)
             - (b - a) * s_below * (1.0 - s_below) * gamma)
    d_cens = np.where(clamped, 0.0, (d_num * denom + num) / (denom * denom))
    return contrib, np.where(ev, d_unc, d_cens)


def soft_dcal(batch: CdfBatch, cfg: SoftConfig | None = None, extend: bool = True) -> float:
    """Soft D-calibration of one batch (censored points via ``zeta_cens``)."""
    cfg = cfg or SoftConfig()
    if len(batch) == 0:
        raise ValueError("empty batch")
    resid = membership(batch, cfg, extend).mean(axis=0) - cfg.bins.widths
    return float(np.sum(resid * resid))


def soft_dcal_grad(batch: CdfBatch, cfg: SoftConfig | None = None,
                   extend: bool = True) -> tuple[float, np.ndarray]:
    """Soft D-calibration and its derivative with respect to each CDF value."""
    cfg = cfg or SoftConfig()
    m = len(batch)
    if m == 0:
        raise ValueError("empty batch")
    contrib, d = membership(batch, cfg, extend, with_grad=True)
    resid = contrib.mean(axis=0) - cfg.bins.widths
    value = float(np.sum(resid * resid))
    d_f = (2.0 / m) * (d @ resid)
    return value, d_f


@dataclass
class PenaltyValue:
    value: float
    grad: np.ndarray
    d_cdf: np.ndarray


def xcal_batch_penalty(model, batch, cfg: SoftConfig | None = None, theta=None,
                       evaluation=None, dropout=0.0, rng=None) -> PenaltyValue:
    """Soft D-calibration of the model CDF on one minibatch, with its gradient.

    ``batch`` is a :class:`~xcalsurv.data.Dataset`. A precomputed model
    ``evaluation`` at the batch times may be passed to share the forward pass.
    """
    cfg = cfg or SoftConfig()
    if len(batch) < 2:
        raise ValueError("X-CAL needs a batch of at least two points")
    if evaluation is None:
        evaluation = model.evaluate(batch.x, batch.time, theta, dropout=dropout, rng=rng)
    cb = CdfBatch(np.clip(evaluation.cdf, 0.0, 1.0), batch.event)
    value, d_f = soft_dcal_grad(cb, cfg)
    return PenaltyValue(value, evaluation.grad(d_cdf=d_f), d_f)


def batch_penalty_mean(batch: CdfBatch, cfg: SoftConfig, partition: list[np.ndarray]) -> float:
    """Size-weighted mean of per-batch soft D-calibration over a partition."""
    n = sum(len(p) for p in partition)
    total = 0.0
    for idx in partition:
        idx = np.sort(idx)
        total += len(idx) * soft_dcal(CdfBatch(batch.values[idx], batch.events[idx]), cfg)
    return total / n


def random_partition(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def jensen_slack_report(data: CdfBatch, cfg: SoftConfig, batch_sizes, trials: int = 10,
                        seed: int = 0) -> list[dict]:
    """Monte Carlo estimate of the expected per-batch penalty per batch size,
    next to soft D-calibration of the pooled data."""
    pooled = soft_dcal(data, cfg)
    rng = np.random.default_rng(seed)
    rows = []
    for m in batch_sizes:
        if m > len(data):
            raise ValueError(f"batch size {m} exceeds data size {len(data)}")
        bounds = [batch_penalty_mean(data, cfg, random_partition(len(data), m, rng))
                  for _ in range(trials)]
        rows.append({"batch_size": int(m), "upper_bound": float(np.mean(bounds)),
                     "upper_bound_se": float(np.std(bounds) / np.sqrt(trials)),
                     "soft_dcal": pooled})
    return rows
