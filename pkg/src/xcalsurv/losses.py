"""Censored negative log-likelihood, Survival-CRPS and the X-calibrated
combined objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .xcal import SoftConfig, xcal_batch_penalty

SURVIVAL_FLOOR = 1e-12
LOSS_KINDS = ("nll", "scrps")
N_QUAD = 256


@dataclass
class LossValue:
    value: float
    grad: np.ndarray
    n_clamped: int = 0


def _rng(seed):
    return None if seed is None else np.random.default_rng(seed)


def nll_loss(model, batch: Dataset, theta=None, dropout=0.0, dropout_seed=None,
             evaluation=None) -> LossValue:
    """Mean of ``-[delta log f(u|x) + (1 - delta) log S(u|x)]`` over the batch.

    For discrete families ``f`` is the mass of the bin containing ``u``. The
    survival term is floored at ``SURVIVAL_FLOOR``; floored points get zero
    gradient and are counted in ``n_clamped``.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if evaluation is None:
        evaluation = model.evaluate(batch.x, batch.time, theta, dropout=dropout,
                                    rng=_rng(dropout_seed))
    ev = batch.event
    floor = np.log(SURVIVAL_FLOOR)
    log_s = evaluation.log_survival
    floored = (~ev) & (log_s < floor)
    log_s = np.where(floored, floor, log_s)
    n = len(batch)
    terms = np.where(ev, evaluation.log_density, log_s)
    value = -float(np.mean(terms))
    d_logf = np.where(ev, -1.0 / n, 0.0)
    d_logs = np.where(ev | floored, 0.0, -1.0 / n)
    grad = evaluation.grad(d_log_density=d_logf, d_log_survival=d_logs)
    return LossValue(value, grad, int(floored.sum()) + evaluation.n_clamped)


# -- Survival-CRPS ------------------------------------------------------------

def _trapezoid_weights(h: float, m: int) -> np.ndarray:
    w = np.full(m, h)
    w[0] = w[-1] = 0.5 * h
    return w


def quadrature_nodes(y: np.ndarray, n: int = N_QUAD):
    """Nodes and weights for the two S-CRPS integrals.

    Left: ``n``-node trapezoid on ``[0, y]``. Tail: ``z = y + s / (1 - s)``
    with an ``n``-node trapezoid on ``s`` in ``[0, 1]`` (the integrand
    vanishes at ``s = 1``). The zero-valued end nodes ``z = 0`` and ``s = 1``
    are dropped, leaving ``n - 1`` nodes per integral.
    """
    y = np.asarray(y, dtype=np.float64)
    grid = np.linspace(0.0, 1.0, n)
    w = _trapezoid_weights(1.0 / (n - 1), n)
    left_t = y[:, None] * grid[None, 1:]
    left_w = y[:, None] * w[None, 1:]
    s = grid[:-1]
    tail_t = y[:, None] + (s / (1.0 - s))[None, :]
    tail_w = np.broadcast_to((w[:-1] / (1.0 - s) ** 2)[None, :], tail_t.shape)
    return left_t, left_w, tail_t, tail_w


def scrps_quadrature(cdf, y, event, n: int = N_QUAD) -> np.ndarray:
    """Per-point S-CRPS of any vectorized ``cdf(t)`` (``t`` shaped ``(n, m)``)
    by the same quadrature the continuous loss uses."""
    y = np.asarray(y, dtype=np.float64)
    event = np.asarray(event, dtype=bool)
    left_t, left_w, tail_t, tail_w = quadrature_nodes(y, n)
    left = np.sum(left_w * cdf(left_t) ** 2, axis=1)
    tail = np.sum(tail_w * (1.0 - cdf(tail_t)) ** 2, axis=1)
    return left + np.where(event, tail, 0.0)


def _scrps_continuous(model, batch, theta, dropout, dropout_seed, n=N_QUAD):
    left_t, left_w, tail_t, tail_w = quadrature_nodes(batch.time, n)
    m = left_t.shape[1]
    ev = model.evaluate(batch.x, np.concatenate([left_t, tail_t], axis=1), theta,
                        dropout=dropout, rng=_rng(dropout_seed))
    f_left = ev.cdf[:, :m]
    s_tail = ev.survival[:, m:]
    obs = batch.event[:, None]
    per_point = np.sum(left_w * f_left ** 2, axis=1) + np.sum(
        np.where(obs, tail_w * s_tail ** 2, 0.0), axis=1)
    k = len(batch)
    d_cdf = np.concatenate([2.0 * left_w * f_left, np.where(obs, -2.0 * tail_w * s_tail, 0.0)],
                           axis=1) / k
    return float(np.mean(per_point)), ev.grad(d_cdf=d_cdf)


def _segment_terms(length, f_start, f_end):
    # exact integral of the square of a linear function over a segment
    q = length * (f_start ** 2 + f_start * f_end + f_end ** 2) / 3.0
    dq_s = length * (2.0 * f_start + f_end) / 3.0
    dq_e = length * (2.0 * f_end + f_start) / 3.0
    return q, dq_s, dq_e


def scrps_discrete_terms(p: np.ndarray, edges: np.ndarray, y: np.ndarray,
                         event: np.ndarray, interpolate: bool):
    """Exact per-point S-CRPS of a discrete model and ``d/dp``.

    The CDF is piecewise constant (or piecewise linear when interpolated)
    over the grid and equals 1 beyond the last edge.
    """
    n, B = p.shape
    lo, hi = edges[None, :-1], edges[None, 1:]
    width = hi - lo
    yy = y[:, None]
    before = np.concatenate([np.zeros((n, 1)), np.cumsum(p, axis=1)[:, :-1]], axis=1)

    left_end = np.minimum(hi, yy)
    left_len = np.maximum(left_end - lo, 0.0)
    tail_start = np.maximum(lo, yy)
    tail_len = np.maximum(hi - tail_start, 0.0)
    if interpolate:
        a_ls = np.zeros_like(left_len)
        a_le = np.clip((left_end - lo) / width, 0.0, 1.0)
        a_ts = np.clip((tail_start - lo) / width, 0.0, 1.0)
        a_te = np.ones_like(tail_len)
    else:
        a_ls = a_le = a_ts = a_te = np.ones_like(left_len)

    f_ls, f_le = before + a_ls * p, before + a_le * p
    ql, dls, dle = _segment_terms(left_len, f_ls, f_le)
    g_ts, g_te = 1.0 - (before + a_ts * p), 1.0 - (before + a_te * p)
    qt, dts, dte = _segment_terms(tail_len, g_ts, g_te)
    obs = event[:, None]
    qt = np.where(obs, qt, 0.0)
    dts = np.where(obs, -dts, 0.0)
    dte = np.where(obs, -dte, 0.0)

    beyond = np.maximum(y - edges[-1], 0.0)
    value = ql.sum(axis=1) + qt.sum(axis=1) + beyond
    # coefficient on p_j from segments of later bins (j < k) and own bin (j = k)
    c = dls + dle + dts + dte
    diag = a_ls * dls + a_le * dle + a_ts * dts + a_te * dte
    later = np.cumsum(c[:, ::-1], axis=1)[:, ::-1]
    d_p = diag + np.concatenate([later[:, 1:], np.zeros((n, 1))], axis=1)
    return value, d_p


def _scrps_discrete(model, batch, theta, dropout, dropout_seed):
    p, _, back = model.masses(batch.x, theta, dropout=dropout, rng=_rng(dropout_seed))
    values, d_p = scrps_discrete_terms(p, model.grid.edges, batch.time, batch.event,
                                       model.interpolate)
    return float(np.mean(values)), back(d_p / len(batch))


def scrps_loss(model, batch: Dataset, theta=None, dropout=0.0, dropout_seed=None) -> LossValue:
    """Mean Survival-CRPS ``int_0^u F^2 + delta int_u^inf (1 - F)^2``.

    Continuous families use the trapezoid scheme of :func:`quadrature_nodes`;
    discrete families use exact piecewise sums over the time grid.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if getattr(model, "discrete", False):
        value, grad = _scrps_discrete(model, batch, theta, dropout, dropout_seed)
    else:
        value, grad = _scrps_continuous(model, batch, theta, dropout, dropout_seed)
    if not np.isfinite(value):
        raise FloatingPointError("non-finite S-CRPS")
    return LossValue(value, grad)


def base_loss(model, batch, loss_kind: str, theta=None, dropout=0.0, dropout_seed=None):
    if loss_kind == "nll":
        return nll_loss(model, batch, theta, dropout, dropout_seed)
    if loss_kind == "scrps":
        return scrps_loss(model, batch, theta, dropout, dropout_seed)
    raise ValueError(f"unknown loss {loss_kind!r}")


@dataclass
class ObjectiveValue(LossValue):
    base: float = 0.0
    penalty: float = 0.0


def combined_objective(model, batch: Dataset, lam: float, cfg: SoftConfig | None = None,
                       loss_kind: str = "nll", theta=None, dropout=0.0,
                       dropout_seed=None) -> ObjectiveValue:
    """Base loss plus ``lam`` times the minibatch X-CAL penalty.

    With ``lam == 0`` the penalty is never computed.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    cfg = cfg or SoftConfig()
    evaluation = None
    if loss_kind == "nll":
        evaluation = model.evaluate(batch.x, batch.time, theta, dropout=dropout,
                                    rng=_rng(dropout_seed))
        base = nll_loss(model, batch, theta, evaluation=evaluation)
    else:
        base = base_loss(model, batch, loss_kind, theta, dropout, dropout_seed)
    if lam == 0:
        return ObjectiveValue(base.value, base.grad, base.n_clamped, base.value, 0.0)
    pen = xcal_batch_penalty(model, batch, cfg, theta, evaluation=evaluation,
                             dropout=dropout, rng=_rng(dropout_seed))
    return ObjectiveValue(base.value + lam * pen.value, base.grad + lam * pen.grad,
                          base.n_clamped, base.value, pen.value)
