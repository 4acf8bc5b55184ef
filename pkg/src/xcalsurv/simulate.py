"""Synthetic survival data with known conditionals.

Two generators: gamma failure times with a log-linear mean in Gaussian
covariates, and gamma times driven by one of ten discrete risk groups
(one-hot covariates). Both return an :class:`OracleHandle` holding the true
failure times and conditional CDF.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import gammainc

from .data import Dataset

# risk score per digit class 0..9
RISK_SCORES = np.array([11.25, 2.25, 5.25, 5.0, 4.75, 8.0, 2.0, 11.0, 1.75, 10.75])


def gamma_sample(alpha, beta, rng: np.random.Generator, size=None) -> np.ndarray:
    """Gamma(shape ``alpha``, rate ``beta``) draws by Marsaglia-Tsang squeeze
    and rejection; shapes below 1 are boosted via ``G(alpha + 1) U^(1/alpha)``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    shape = np.broadcast_shapes(alpha.shape, beta.shape) if size is None else size
    alpha = np.broadcast_to(alpha, shape).ravel()
    beta = np.broadcast_to(beta, shape).ravel()
    if np.any(alpha <= 0) or np.any(beta <= 0):
        raise ValueError("alpha and beta must be positive")
    small = alpha < 1.0
    a = np.where(small, alpha + 1.0, alpha)
    d = a - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty_like(a)
    pending = np.arange(len(a))
    while len(pending):
        x = rng.standard_normal(len(pending))
        u = rng.random(len(pending))
        dp, cp = d[pending], c[pending]
        v = (1.0 + cp * x) ** 3
        ok = v > 0
        vs = np.where(ok, v, 1.0)
        accept = ok & ((u < 1.0 - 0.0331 * x ** 4)
                       | (np.log(u) < 0.5 * x * x + dp * (1.0 - vs + np.log(vs))))
        out[pending[accept]] = dp[accept] * vs[accept]
        pending = pending[~accept]
    if small.any():
        idx = np.flatnonzero(small)
        out[idx] *= rng.random(len(idx)) ** (1.0 / alpha[idx])
    return (out / beta).reshape(shape)


def uniform_censoring(times, rng: np.random.Generator) -> np.ndarray:
    """``c_i ~ Unif(min t, 90th percentile of t)`` i.i.d."""
    t = np.asarray(times, dtype=np.float64)
    if len(t) < 10:
        raise ValueError("need at least 10 times")
    lo, hi = t.min(), np.percentile(t, 90.0)
    if not hi > lo:
        raise ValueError("degenerate range for uniform censoring")
    return rng.uniform(lo, hi, size=len(t))


@dataclass
class OracleHandle:
    """True conditional CDF plus the latent failure and censoring times."""

    cdf_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    true_times: np.ndarray
    censor_times: np.ndarray | None
    weights: dict = field(default_factory=dict)

    def cdf(self, x, t) -> np.ndarray:
        return self.cdf_fn(np.asarray(x, dtype=np.float64), np.asarray(t, dtype=np.float64))


def _gamma_cdf(mean, var):
    def cdf(t):
        alpha = mean ** 2 / var
        beta = mean / var
        return gammainc(alpha, beta * t)
    return cdf


@dataclass(frozen=True)
class GammaSimConfig:
    n: int = 20000
    d: int = 32
    cov_scale: float = 10.0
    mean_var: float = 1e-3
    weight_range: float = 0.1
    censoring: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ValueError("n and d must be positive")
        if not (self.cov_scale > 0 and self.mean_var > 0 and self.weight_range >= 0):
            raise ValueError("cov_scale and mean_var must be positive")


def simulate_gamma(cfg: GammaSimConfig, weights: np.ndarray | None = None):
    """Gamma failure times with mean ``exp(w . x)`` and variance ``mean_var``.

    Censoring times come from the same construction with an independent
    weight vector, so failure and censoring are independent given ``x``.
    Weights are drawn before covariates: configs that differ only in ``n``
    share the same true model.
    """
    rng = np.random.default_rng(cfg.seed)
    w = rng.uniform(-cfg.weight_range, cfg.weight_range, size=cfg.d)
    w_c = rng.uniform(-cfg.weight_range, cfg.weight_range, size=cfg.d)
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
    x = rng.normal(0.0, np.sqrt(cfg.cov_scale), size=(cfg.n, cfg.d))
    v = cfg.mean_var
    mu = np.exp(x @ w)
    t = gamma_sample(mu ** 2 / v, mu / v, rng)
    c = None
    if cfg.censoring:
        mu_c = np.exp(x @ w_c)
        c = gamma_sample(mu_c ** 2 / v, mu_c / v, rng)
        u, event = np.minimum(t, c), t < c
    else:
        u, event = t, np.ones(cfg.n, dtype=bool)

    def cdf(xq, tq):
        m = np.exp(xq @ w)
        if tq.ndim == 2:
            m = m[:, None]
        return _gamma_cdf(m, v)(tq)

    oracle = OracleHandle(cdf, t, c, {"failure": w, "censoring": w_c if cfg.censoring else None})
    return Dataset(x, u, event, name="gamma"), oracle


def simulate_risk_groups(n: int, seed: int = 0, censoring: bool = True, mean_var: float = 1e-3):
    """Gamma times whose mean is the risk score of a uniformly drawn class.

    Covariates are the one-hot class labels. Censoring times are uniform
    between the smallest failure time and the 90th percentile of this draw.
    """
    if n < 10:
        raise ValueError("need n >= 10")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    x = np.eye(10)[labels]
    mu = RISK_SCORES[labels]
    t = gamma_sample(mu ** 2 / mean_var, mu / mean_var, rng)
    c = None
    if censoring:
        c = uniform_censoring(t, rng)
        u, event = np.minimum(t, c), t < c
    else:
        u, event = t, np.ones(n, dtype=bool)

    def cdf(xq, tq):
        m = RISK_SCORES[np.argmax(xq, axis=1)]
        if tq.ndim == 2:
            m = m[:, None]
        return _gamma_cdf(m, mean_var)(tq)

    oracle = OracleHandle(cdf, t, c, {"labels": labels})
    return Dataset(x, u, event, name="risk_groups"), oracle


def save_oracle(data: Dataset, oracle: OracleHandle, path: str | Path) -> None:
    """Sidecar CSV aligned by row with the dataset: true failure time, the true
    CDF at it and at the observed time, and the censoring time when present."""
    cols = ["t_true", "cdf_t_true", "cdf_u"]
    if oracle.censor_times is not None:
        cols.append("c_true")
    f_t = oracle.cdf(data.x, oracle.true_times)
    f_u = oracle.cdf(data.x, data.time)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i in range(len(data)):
            row = [repr(float(oracle.true_times[i])), repr(float(f_t[i])), repr(float(f_u[i]))]
            if oracle.censor_times is not None:
                row.append(repr(float(oracle.censor_times[i])))
            w.writerow(row)


def load_oracle(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    cols = np.array([[float(v) for v in r] for r in rows[1:] if r])
    return {name: cols[:, j] for j, name in enumerate(header)}
