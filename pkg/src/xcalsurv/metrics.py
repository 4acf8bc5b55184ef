"""Exact evaluation metrics: D-calibration with and without censoring, the
per-time chi-squared calibration statistic, Harrell's concordance and test NLL."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .data import BinScheme, Dataset
from .xcal import EPS_CENS


def _check_unit(values):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or len(values) == 0:
        raise ValueError("need a nonempty 1-d array of CDF values")
    if np.any(~np.isfinite(values)) or np.any((values < 0) | (values > 1)):
        raise ValueError("CDF values must lie in [0, 1]")
    return values


def bin_contributions(cdf_values, events, bins: BinScheme) -> np.ndarray:
    """Summed per-bin mass: hard indicators for events, the expected bin mass
    under ``Unif(F_u, 1)`` for censored points."""
    f = _check_unit(cdf_values)
    ev = np.asarray(events, dtype=bool)
    B = bins.n_bins
    k = bins.assign(f)
    totals = np.bincount(k[ev], minlength=B).astype(np.float64)
    if not ev.all():
        fc = np.minimum(f[~ev], 1.0 - EPS_CENS)
        kc = k[~ev]
        inv = 1.0 / (1.0 - fc)
        own = np.bincount(kc, weights=(bins.upper[kc] - fc) * inv, minlength=B)
        # every bin after the one holding F_u receives width / (1 - F_u)
        later = np.cumsum(np.bincount(kc + 1, weights=inv, minlength=B + 1)[:B])
        totals = totals + own + bins.widths * later
    return totals


def clamped_count(cdf_values, events) -> int:
    f = np.asarray(cdf_values)
    return int(np.sum(~np.asarray(events, dtype=bool) & (f >= 1.0 - EPS_CENS)))


def censored_exact_dcal(cdf_values, events, bins: BinScheme | None = None) -> float:
    """D-calibration where each censored point spreads its unit mass over the
    bins as ``Unif(F_u, 1)`` would; ``F_u`` is clamped below ``1 - EPS_CENS``."""
    bins = bins or BinScheme.equal()
    totals = bin_contributions(cdf_values, events, bins)
    resid = totals / len(np.asarray(cdf_values)) - bins.widths
    return float(np.sum(resid * resid))


def exact_dcal(cdf_values, bins: BinScheme | None = None) -> float:
    """``sum_I (fraction of values in I - |I|)^2`` with half-open hard bins."""
    f = np.asarray(cdf_values)
    return censored_exact_dcal(f, np.ones(f.shape, dtype=bool), bins)


@dataclass
class Chi2Result:
    statistic: float
    observed: np.ndarray
    expected: np.ndarray
    mean_prob: np.ndarray
    sizes: np.ndarray


def chi2_calibration_test(probabilities, events_by_t, n_groups: int = 10) -> Chi2Result:
    """Classical calibration statistic at one time of interest.

    ``probabilities`` are modeled ``P(T <= t*)``; ``events_by_t`` flags whether
    the failure happened by ``t*`` (uncensored evaluation data). Points are
    grouped by quantiles of the predicted probability. The p-value is left to
    the caller (compare against chi-squared with the appropriate dof).
    """
    p = np.asarray(probabilities, dtype=np.float64)
    o = np.asarray(events_by_t, dtype=np.float64)
    if n_groups < 2 or len(p) < n_groups:
        raise ValueError("need at least two nonempty groups")
    groups = np.array_split(np.argsort(p, kind="stable"), n_groups)
    obs = np.array([o[g].sum() for g in groups])
    exp = np.array([p[g].sum() for g in groups])
    sizes = np.array([len(g) for g in groups], dtype=np.float64)
    pbar = exp / sizes
    if np.any((pbar <= 0) | (pbar >= 1)):
        raise ValueError("a group has mean probability 0 or 1")
    stat = float(np.sum((obs - exp) ** 2 / (sizes * pbar * (1.0 - pbar))))
    return Chi2Result(stat, obs, exp, pbar, sizes)


# -- concordance --------------------------------------------------------------

def concordance_bruteforce(times, events, risk_scores) -> float:
    """O(n^2) enumeration of comparable pairs ``u_i < u_j, delta_i = 1``."""
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=bool)
    r = np.asarray(risk_scores, dtype=np.float64)
    comparable = (t[:, None] < t[None, :]) & e[:, None]
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        raise ValueError("no comparable pairs")
    conc = np.sum(comparable & (r[:, None] > r[None, :]))
    ties = np.sum(comparable & (r[:, None] == r[None, :]))
    return (conc + 0.5 * ties) / n_pairs


def concordance(times, events, risk_scores) -> float:
    """Harrell's C: fraction of comparable pairs ranked correctly, risk ties 1/2.

    A pair is comparable when the earlier time is an observed event; tied times
    are not comparable. O(n log n) with a Fenwick tree over risk ranks.
    """
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=bool)
    r = np.asarray(risk_scores, dtype=np.float64)
    n = len(t)
    _, rank = np.unique(r, return_inverse=True)
    rank = rank + 1
    m = int(rank.max())
    tree = [0] * (m + 1)
    order = np.argsort(-t, kind="stable")
    t_sorted = t[order]

    def add(i):
        while i <= m:
            tree[i] += 1
            i += i & -i

    def prefix(i):
        s = 0
        while i > 0:
            s += tree[i]
            i -= i & -i
        return s

    n_pairs = conc = ties = 0
    inserted = 0
    start = 0
    rank_l = rank.tolist()
    ev_l = e.tolist()
    order_l = order.tolist()
    while start < n:
        stop = start
        while stop < n and t_sorted[stop] == t_sorted[start]:
            stop += 1
        # tree holds every point with a strictly larger time
        for pos in range(start, stop):
            i = order_l[pos]
            if ev_l[i]:
                below = prefix(rank_l[i] - 1)
                equal = prefix(rank_l[i]) - below
                conc += below
                ties += equal
                n_pairs += inserted
        for pos in range(start, stop):
            add(rank_l[order_l[pos]])
        inserted += stop - start
        start = stop
    if n_pairs == 0:
        raise ValueError("no comparable pairs")
    return (conc + 0.5 * ties) / n_pairs


# -- report -------------------------------------------------------------------

@dataclass
class MetricsReport:
    test_nll: float
    dcal: float
    concordance: float
    n_test: int
    bins_used: int
    dcal_censored: float | None = None
    label: str = "test"
    n_clamped: int = 0
    oracle_dcal: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def evaluate(model, dataset: Dataset, bins: BinScheme | None = None, label: str = "test",
             true_times=None) -> MetricsReport:
    """NLL, D-calibration and concordance of ``model`` on ``dataset``.

    D-calibration uses the censored estimator whenever any point is censored.
    With ``true_times`` (simulator oracle), ``oracle_dcal`` is the exact
    D-calibration of the model CDF at the true failure times.
    """
    from .losses import nll_loss

    bins = bins or BinScheme.equal()
    ev = model.evaluate(dataset.x, dataset.time)
    nll = nll_loss(model, dataset, evaluation=ev)
    f = np.clip(ev.cdf, 0.0, 1.0)
    censored = not dataset.event.all()
    dcal_c = censored_exact_dcal(f, dataset.event, bins) if censored else None
    dcal = dcal_c if censored else exact_dcal(f, bins)
    conc = concordance(dataset.time, dataset.event, model.predict_risk_score(dataset.x))
    oracle = None
    if true_times is not None:
        f_true = np.clip(model.evaluate(dataset.x, np.asarray(true_times)).cdf, 0.0, 1.0)
        oracle = exact_dcal(f_true, bins)
    return MetricsReport(test_nll=nll.value, dcal=dcal, concordance=float(conc),
                         n_test=len(dataset), bins_used=bins.n_bins, dcal_censored=dcal_c,
                         label=label, n_clamped=nll.n_clamped + clamped_count(f, dataset.event),
                         oracle_dcal=oracle)
