"""Conditional survival model families.

Every family maps covariates to a distribution over failure time and exposes
its CDF, survival function and log-density (log bin mass for the discrete
families) together with a reverse pass that turns upstream derivatives of
those quantities into a parameter gradient.

Continuous families: ``lognormal`` and ``weibull``. Discrete families:
``categorical`` and ``mtlr``, defined over a :class:`TimeGrid`, optionally
with linear within-bin CDF interpolation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import expit, log_ndtr, log_softmax, ndtr

from .params import (Parameterization, backward, forward_with_cache, init_params,
                     load_params, save_params)

FAMILIES = ("lognormal", "weibull", "categorical", "mtlr")
DISCRETE_FAMILIES = ("categorical", "mtlr")
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Edges ``0 = e_0 < e_1 < ... < e_B`` of the discrete time bins.

    Bin ``k`` covers ``(e_k, e_{k+1}]``.
    """

    edges: np.ndarray

    def __post_init__(self):
        edges = np.array(self.edges, dtype=np.float64, copy=True)
        if edges.ndim != 1 or len(edges) < 3:
            raise ValueError("time grid needs at least two bins")
        if edges[0] != 0.0 or np.any(np.diff(edges) <= 0):
            raise ValueError("time grid must start at 0 and be strictly ascending")
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)

    @property
    def n_bins(self) -> int:
        return len(self.edges) - 1


def quantile_bin_edges(times: np.ndarray, events: np.ndarray, n_bins: int) -> TimeGrid:
    """Percentile grid over the uncensored training times.

    Edge ``j`` is the ``100 j / n_bins`` percentile (linear interpolation),
    the last edge the largest uncensored time. Ties are nudged right by one
    ulp so the grid stays strictly ascending.
    """
    t = np.asarray(times, dtype=np.float64)[np.asarray(events, dtype=bool)]
    if len(t) < n_bins:
        raise ValueError(f"need at least {n_bins} uncensored times, got {len(t)}")
    if len(np.unique(t)) < 2:
        raise ValueError("degenerate time grid: all uncensored times are equal")
    edges = np.empty(n_bins + 1)
    edges[0] = 0.0
    edges[1:-1] = np.percentile(t, 100.0 * np.arange(1, n_bins) / n_bins)
    edges[-1] = t.max()
    for j in range(1, n_bins + 1):
        if edges[j] <= edges[j - 1]:
            edges[j] = np.nextafter(edges[j - 1], np.inf)
    return TimeGrid(edges)


class Evaluation:
    """Model quantities at times ``t`` plus the reverse pass.

    ``cdf``, ``survival``, ``log_density`` and ``log_survival`` all have the
    shape of ``t``. ``grad`` maps upstream derivatives with respect to those
    arrays to a gradient over the model parameters.
    """

    def __init__(self, cdf, survival, log_density, log_survival, backward_fn, n_clamped=0):
        self.cdf = cdf
        self.survival = survival
        self.log_density = log_density
        self.log_survival = log_survival
        self.n_clamped = n_clamped
        self._backward = backward_fn

    def grad(self, d_cdf=None, d_log_density=None, d_log_survival=None) -> np.ndarray:
        zero = np.zeros_like(self.cdf)
        return self._backward(zero if d_cdf is None else d_cdf,
                              zero if d_log_density is None else d_log_density,
                              zero if d_log_survival is None else d_log_survival)


class SurvivalModel:
    """Base class: one or more networks feeding the distribution heads.

    ``theta`` holds the current parameters; every method accepts an explicit
    ``theta`` override so the same object can be evaluated at trial points.
    """

    family: str = ""
    discrete: bool = False

    def __init__(self, input_dim: int, hidden=(), nets=(), n_extra=0):
        self.input_dim = int(input_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self._nets: list[tuple[Parameterization, slice]] = []
        pos = 0
        for net in nets:
            self._nets.append((net, slice(pos, pos + net.n_params)))
            pos += net.n_params
        self._extra = slice(pos, pos + n_extra)
        self.n_params = pos + n_extra
        self.theta = np.zeros(self.n_params)
        self.input_mean: np.ndarray | None = None
        self.input_scale: np.ndarray | None = None

    def fit_standardizer(self, x) -> None:
        """Standardize covariates with statistics of ``x`` before the networks."""
        x = np.asarray(x, dtype=np.float64)
        scale = x.std(axis=0)
        self.input_mean = x.mean(axis=0)
        self.input_scale = np.where(scale > 0, scale, 1.0)

    # -- parameters ---------------------------------------------------------

    def init_params(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        theta = np.zeros(self.n_params)
        for net, sl in self._nets:
            theta[sl] = init_params(net, int(rng.integers(2**31)))
        self.theta = theta
        return theta

    def layout(self) -> dict:
        nets = []
        for i, (net, sl) in enumerate(self._nets):
            nets.append({"net": i, "start": sl.start, "stop": sl.stop,
                         "parameterization": net.to_dict(),
                         "layers": net.layout_descriptor()})
        return {"n_params": self.n_params, "nets": nets,
                "extra": {"start": self._extra.start, "stop": self._extra.stop}}

    def _theta(self, theta):
        theta = self.theta if theta is None else np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        return theta

    def _heads(self, theta, x, dropout=0.0, rng=None):
        if self.input_mean is not None:
            x = (x - self.input_mean) / self.input_scale
        outs, caches = [], []
        for net, sl in self._nets:
            out, cache = forward_with_cache(net, theta[sl], x, dropout=dropout, rng=rng)
            outs.append(out)
            caches.append(cache)
        return np.concatenate(outs, axis=1), theta[self._extra], caches

    def _heads_backward(self, theta, caches, d_heads, d_extra=None):
        grad = np.zeros(self.n_params)
        col = 0
        for (net, sl), cache in zip(self._nets, caches):
            k = net.output_dim
            grad[sl] = backward(net, theta[sl], None, d_heads[:, col:col + k], cache=cache)
            col += k
        if d_extra is not None:
            grad[self._extra] = d_extra
        return grad

    # -- interface ----------------------------------------------------------

    def evaluate(self, x, t, theta=None, dropout=0.0, rng=None) -> Evaluation:
        raise NotImplementedError

    def cdf(self, x, t, theta=None) -> np.ndarray:
        return self.evaluate(x, t, theta).cdf

    def predict_median(self, x, theta=None) -> np.ndarray:
        raise NotImplementedError

    def predict_risk_score(self, x, theta=None) -> np.ndarray:
        """Negated predicted median survival time; larger means riskier."""
        return -self.predict_median(x, theta)

    def header(self) -> dict:
        h = {"family": self.family, "input_dim": self.input_dim, "hidden": list(self.hidden)}
        if self.input_mean is not None:
            h["standardizer"] = {"mean": [float(v) for v in self.input_mean],
                                 "scale": [float(v) for v in self.input_scale]}
        return h

    def copy(self, theta=None) -> "SurvivalModel":
        other = model_from_header(self.header())
        other.theta = np.array(self.theta if theta is None else theta, dtype=np.float64)
        return other


def _as_2d(x):
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(1, -1) if x.ndim == 1 else x


def _broadcast(col, t):
    return col if t.ndim == 1 else col[:, None]


def _reduce(g, t):
    return g if t.ndim == 1 else g.sum(axis=1)


def _check_t(x, t):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(x.shape[0], float(t))
    if t.shape[0] != x.shape[0] or t.ndim > 2:
        raise ValueError("t must have one row per covariate row")
    return t


class LogNormal(SurvivalModel):
    """``log T ~ Normal(mu(x), sigma(x)^2)``; separate networks for ``mu`` and
    ``log sigma``."""

    family = "lognormal"

    def __init__(self, input_dim: int, hidden=()):
        nets = [Parameterization(input_dim, 1, hidden), Parameterization(input_dim, 1, hidden)]
        super().__init__(input_dim, hidden, nets)

    def location_scale(self, x, theta=None):
        H, _, _ = self._heads(self._theta(theta), _as_2d(x))
        return H[:, 0], np.exp(H[:, 1])

    def evaluate(self, x, t, theta=None, dropout=0.0, rng=None) -> Evaluation:
        theta = self._theta(theta)
        x = _as_2d(x)
        t = _check_t(x, t)
        if np.any(t <= 0):
            raise ValueError("t must be positive")
        H, _, caches = self._heads(theta, x, dropout, rng)
        mu, s = _broadcast(H[:, 0], t), _broadcast(H[:, 1], t)
        sigma = np.exp(s)
        logt = np.log(t)
        z = (logt - mu) / sigma
        cdf = ndtr(z)
        log_surv = log_ndtr(-z)
        log_pdf_z = -0.5 * z * z - _LOG_SQRT_2PI
        log_density = log_pdf_z - logt - s

        def back(d_cdf, d_logf, d_logs):
            # derivative of the combined upstream with respect to z
            hazard = np.exp(log_pdf_z - log_surv)
            g_z = d_cdf * np.exp(log_pdf_z) - d_logs * hazard - d_logf * z
            d_mu = -g_z / sigma
            d_s = -g_z * z - d_logf
            dH = np.stack([_reduce(d_mu, t), _reduce(d_s, t)], axis=1)
            return self._heads_backward(theta, caches, dH)

        return Evaluation(cdf, ndtr(-z), log_density, log_surv, back)

    def predict_median(self, x, theta=None):
        mu, _ = self.location_scale(x, theta)
        return np.exp(mu)


class Weibull(SurvivalModel):
    """Weibull AFT: scale ``exp(beta . x + beta_0) + 1`` and concentration
    ``1 + sigmoid(kappa)`` in (1, 2) for a free scalar ``kappa``."""

    family = "weibull"

    def __init__(self, input_dim: int, hidden=()):
        super().__init__(input_dim, hidden, [Parameterization(input_dim, 1, hidden)], n_extra=1)

    def scale_concentration(self, x, theta=None):
        H, extra, _ = self._heads(self._theta(theta), _as_2d(x))
        return np.exp(H[:, 0]) + 1.0, 1.0 + expit(extra[0])

    def evaluate(self, x, t, theta=None, dropout=0.0, rng=None) -> Evaluation:
        theta = self._theta(theta)
        x = _as_2d(x)
        t = _check_t(x, t)
        if np.any(t <= 0):
            raise ValueError("t must be positive")
        H, extra, caches = self._heads(theta, x, dropout, rng)
        eta = _broadcast(H[:, 0], t)
        e_eta = np.exp(eta)
        scale = e_eta + 1.0
        sig = expit(extra[0])
        k = 1.0 + sig
        log_r = np.log(t) - np.log(scale)
        cum_hazard = np.exp(k * log_r)
        surv = np.exp(-cum_hazard)
        cdf = -np.expm1(-cum_hazard)
        log_density = np.log(k) - np.log(scale) + (k - 1.0) * log_r - cum_hazard

        def back(d_cdf, d_logf, d_logs):
            g_h = d_cdf * surv - d_logs - d_logf
            d_scale = -(g_h * cum_hazard + d_logf) * k / scale
            d_k = g_h * cum_hazard * log_r + d_logf * (1.0 / k + log_r)
            d_eta = _reduce(d_scale * e_eta, t)
            d_kappa = np.sum(d_k) * sig * (1.0 - sig)
            return self._heads_backward(theta, caches, d_eta[:, None], np.array([d_kappa]))

        return Evaluation(cdf, surv, log_density, -cum_hazard, back)

    def predict_median(self, x, theta=None):
        scale, k = self.scale_concentration(x, theta)
        return scale * np.log(2.0) ** (1.0 / k)


class DiscreteModel(SurvivalModel):
    """Shared machinery for distributions over the bins of a time grid."""

    discrete = True

    def __init__(self, input_dim, hidden, grid: TimeGrid, interpolate: bool, n_out: int):
        self.grid = grid
        self.interpolate = bool(interpolate)
        super().__init__(input_dim, hidden, [Parameterization(input_dim, n_out, hidden)])

    @property
    def n_bins(self) -> int:
        return self.grid.n_bins

    def _logits(self, H):
        raise NotImplementedError

    def _logits_backward(self, d_logits):
        raise NotImplementedError

    def masses(self, x, theta=None, dropout=0.0, rng=None):
        """Bin probabilities ``(n, B)``, their logs, and a reverse pass taking
        ``d/dp`` (and optionally ``d/dlog p``) to a parameter gradient."""
        theta = self._theta(theta)
        H, _, caches = self._heads(theta, _as_2d(x), dropout, rng)
        logp = log_softmax(self._logits(H), axis=1)
        p = np.exp(logp)

        def back(d_p, d_logp=None):
            g = d_p * p
            if d_logp is not None:
                g = g + d_logp
            d_logits = g - p * g.sum(axis=1, keepdims=True)
            return self._heads_backward(theta, caches, self._logits_backward(d_logits))

        return p, logp, back

    def locate(self, t):
        """Bin index of each time, the within-bin fraction used for the CDF,
        and the number of times clamped beyond the last edge."""
        e = self.grid.edges
        k = np.searchsorted(e, t, side="left") - 1
        n_clamped = int(np.sum(t > e[-1]))
        k = np.clip(k, 0, self.n_bins - 1)
        if self.interpolate:
            frac = np.clip((t - e[k]) / (e[k + 1] - e[k]), 0.0, 1.0)
        else:
            frac = np.ones_like(t)
        return k, frac, n_clamped

    def evaluate(self, x, t, theta=None, dropout=0.0, rng=None) -> Evaluation:
        x = _as_2d(x)
        t = _check_t(x, t)
        if np.any(t < 0):
            raise ValueError("t must be nonnegative")
        p, logp, back_p = self.masses(x, theta, dropout, rng)
        n, B = p.shape
        k, frac, n_clamped = self.locate(t)
        rows = np.arange(n) if t.ndim == 1 else np.arange(n)[:, None]
        zero = np.zeros((n, 1))
        before = np.concatenate([zero, np.cumsum(p, axis=1)], axis=1)       # sum_{j<k}
        after = np.concatenate([np.cumsum(p[:, ::-1], axis=1)[:, ::-1], zero], axis=1)  # sum_{j>=k}
        pk = p[rows, k]
        cdf = np.clip(before[rows, k] + frac * pk, 0.0, 1.0)
        surv = after[rows, k + 1] + (1.0 - frac) * pk
        with np.errstate(divide="ignore"):
            log_surv = np.log(surv)

        def back(d_cdf, d_logf, d_logs):
            with np.errstate(divide="ignore", invalid="ignore"):
                d_s = np.where(surv > 0, d_logs / surv, 0.0)
            lt = np.zeros((n, B + 1))   # coefficient on p_j for j < k
            gt = np.zeros((n, B + 1))   # coefficient on p_j for j > k
            diag = np.zeros((n, B))
            np.add.at(lt, (rows, k), d_cdf)
            np.add.at(gt, (rows, k), d_s)
            np.add.at(diag, (rows, k), d_cdf * frac + d_s * (1.0 - frac))
            d_p = diag
            d_p = d_p + np.cumsum(lt[:, ::-1], axis=1)[:, ::-1][:, 1:]
            d_p = d_p + np.cumsum(gt, axis=1)[:, :B] - gt[:, :B]
            d_logp = np.zeros((n, B))
            np.add.at(d_logp, (rows, k), d_logf)
            return back_p(d_p, d_logp)

        return Evaluation(cdf, surv, logp[rows, k], log_surv, back, n_clamped)

    def predict_median(self, x, theta=None):
        p, _, _ = self.masses(x, theta)
        cum = np.cumsum(p, axis=1)
        k = np.minimum(np.argmax(cum >= 0.5 - 1e-12, axis=1), self.n_bins - 1)
        e = self.grid.edges
        if not self.interpolate:
            return e[k + 1]
        rows = np.arange(len(k))
        before = cum[rows, k] - p[rows, k]
        frac = np.clip((0.5 - before) / np.maximum(p[rows, k], 1e-300), 0.0, 1.0)
        return e[k] + frac * (e[k + 1] - e[k])

    def header(self) -> dict:
        h = super().header()
        h.update(interpolate=self.interpolate, time_grid=[float(v) for v in self.grid.edges])
        return h


class Categorical(DiscreteModel):
    """Softmax over one network output per time bin."""

    family = "categorical"

    def __init__(self, input_dim: int, grid: TimeGrid, hidden=(), interpolate=False):
        super().__init__(input_dim, hidden, grid, interpolate, grid.n_bins)

    def _logits(self, H):
        return H

    def _logits_backward(self, d_logits):
        return d_logits


class MTLR(DiscreteModel):
    """Multi-task logistic regression.

    The network emits ``K - 1`` scores ``g_j``; bin ``k < K`` has logit
    ``sum_{j >= k} g_j`` and the last bin logit 0.
    """

    family = "mtlr"

    def __init__(self, input_dim: int, grid: TimeGrid, hidden=(), interpolate=False):
        super().__init__(input_dim, hidden, grid, interpolate, grid.n_bins - 1)

    def _logits(self, H):
        suffix = np.cumsum(H[:, ::-1], axis=1)[:, ::-1]
        return np.concatenate([suffix, np.zeros((H.shape[0], 1))], axis=1)

    def _logits_backward(self, d_logits):
        return np.cumsum(d_logits[:, :-1], axis=1)


def build_model(family: str, input_dim: int, hidden=(), time_grid=None,
                interpolate: bool = False) -> SurvivalModel:
    hidden = tuple(hidden)
    if family == "lognormal":
        return LogNormal(input_dim, hidden)
    if family == "weibull":
        return Weibull(input_dim, hidden)
    if family in DISCRETE_FAMILIES:
        if time_grid is None:
            raise ValueError(f"{family} needs a time grid")
        grid = time_grid if isinstance(time_grid, TimeGrid) else TimeGrid(np.asarray(time_grid))
        cls = Categorical if family == "categorical" else MTLR
        return cls(input_dim, grid, hidden, interpolate)
    raise ValueError(f"unknown family {family!r}")


def model_from_header(header: dict) -> SurvivalModel:
    header = dict(header)
    std = header.pop("standardizer", None)
    model = build_model(**header)
    if std is not None:
        model.input_mean = np.array(std["mean"], dtype=np.float64)
        model.input_scale = np.array(std["scale"], dtype=np.float64)
        if model.input_mean.shape != (model.input_dim,):
            raise ValueError("standardizer does not match input dimension")
    return model


def save_checkpoint(model: SurvivalModel, directory: str | Path) -> None:
    """``model.json`` header, plus ``params.npy``/``params.json`` values and layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_params(model.theta, model.layout(), directory / "params")
    (directory / "model.json").write_text(json.dumps(model.header(), indent=2) + "\n")


def load_checkpoint(directory: str | Path) -> SurvivalModel:
    directory = Path(directory)
    header = json.loads((directory / "model.json").read_text())
    model = model_from_header(header)
    theta, layout = load_params(directory / "params")
    if theta.shape != (model.n_params,) or layout.get("n_params") != model.n_params:
        raise ValueError("checkpoint parameters do not match the model header")
    model.theta = theta
    return model


def model_fn(model: SurvivalModel, quantity: str, x, t) -> Callable[[np.ndarray], float]:
    """Scalar function of ``theta`` summing one evaluated quantity (test helper)."""
    def f(theta):
        return float(np.sum(getattr(model.evaluate(x, t, theta), quantity)))
    return f
