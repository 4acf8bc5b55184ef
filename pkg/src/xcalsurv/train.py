"""Minibatch Adam training with validation-based epoch selection, and
lambda/seed sweeps."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .data import BinScheme, Dataset, Split, make_batches
from .losses import LOSS_KINDS, base_loss, combined_objective
from .metrics import censored_exact_dcal, evaluate, exact_dcal
from .models import DISCRETE_FAMILIES, FAMILIES, build_model, quantile_bin_edges
from .xcal import SoftConfig, soft_dcal, CdfBatch

log = logging.getLogger(__name__)

SCRPS_FAMILIES = ("lognormal",) + DISCRETE_FAMILIES


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    family: str = "lognormal"
    hidden: tuple[int, ...] = ()
    loss_kind: str = "nll"
    lam: float = 0.0
    gamma: float = 1e4
    dcal_bins: int = 20
    time_bins: int = 50
    interpolate: bool = False
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    dropout: float = 0.0
    batch_size: int = 512
    epochs: int = 50
    seed: int = 0
    selection: str = "combined"   # or "base": select on the loss without penalty
    standardize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        self.validate()

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.loss_kind!r}")
        if self.loss_kind == "scrps" and self.family not in SCRPS_FAMILIES:
            raise ConfigError(f"scrps is not wired for family {self.family!r}")
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if not self.gamma > 0:
            raise ConfigError("gamma must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.selection not in ("combined", "base"):
            raise ConfigError("selection must be 'combined' or 'base'")
        if self.dcal_bins < 2 or self.time_bins < 2:
            raise ConfigError("need at least two bins")

    @property
    def bins(self) -> BinScheme:
        return BinScheme.equal(self.dcal_bins)

    @property
    def soft(self) -> SoftConfig:
        return SoftConfig(self.gamma, self.bins)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def full(cls, **kw) -> "TrainConfig":
        """Full-scale settings: 128-64-64 network, batch 1000, 100 epochs."""
        base = dict(hidden=(128, 64, 64), batch_size=1000, epochs=100)
        base.update(kw)
        return cls(**base)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    skipped: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(theta, grad, state: AdamState, lr=1e-3, weight_decay=0.0,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update with decoupled weight decay.

    A non-finite gradient skips the step and increments ``state.skipped``.
    """
    if not np.all(np.isfinite(grad)):
        state.skipped += 1
        return theta, state
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    theta = theta - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * theta)
    return theta, state


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_base: list = field(default_factory=list)
    val_dcal: list = field(default_factory=list)
    initial_val_loss: float = float("nan")
    selected_epoch: int = -1
    skipped_steps: int = 0
    clamped: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _chunks(data: Dataset, size: int):
    for i in range(0, len(data), size):
        yield data.subset(np.arange(i, min(i + size, len(data))))


def validation_loss(model, data: Dataset, config: TrainConfig, theta=None,
                    chunk: int = 4096) -> tuple[float, float, float]:
    """``(selection loss, base loss, exact D-CAL)`` on held-out data, no dropout.

    The penalty term is soft D-calibration over the whole set.
    """
    base = 0.0
    for part in _chunks(data, chunk):
        base += len(part) * base_loss(model, part, config.loss_kind, theta).value
    base /= len(data)
    f = np.clip(model.evaluate(data.x, data.time, theta).cdf, 0.0, 1.0)
    censored = not data.event.all()
    dcal = censored_exact_dcal(f, data.event, config.bins) if censored else exact_dcal(f, config.bins)
    if config.selection == "base" or config.lam == 0:
        return base, base, dcal
    pen = soft_dcal(CdfBatch(f, data.event), config.soft)
    return base + config.lam * pen, base, dcal


def build_for(config: TrainConfig, train: Dataset):
    grid = None
    if config.family in DISCRETE_FAMILIES:
        grid = quantile_bin_edges(train.time, train.event, config.time_bins)
    model = build_model(config.family, train.dim, config.hidden, time_grid=grid,
                        interpolate=config.interpolate)
    if config.standardize:
        model.fit_standardizer(train.x)
    return model


def train(config: TrainConfig, split: Split):
    """Train one model; returns the model at the best validation epoch and the
    history. Deterministic for a fixed config and split."""
    model = build_for(config, split.train)
    theta = model.init_params(config.seed)
    state = AdamState.zeros(model.n_params)
    history = TrainHistory()
    history.initial_val_loss = validation_loss(model, split.validation, config, theta)[0]
    best, best_theta = np.inf, theta.copy()
    bad = 0
    soft = config.soft
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for step, idx in enumerate(make_batches(len(split.train), config.batch_size,
                                                config.seed, epoch)):
            batch = split.train.subset(idx)
            drop_seed = [config.seed, epoch, step] if config.dropout > 0 else None
            obj = combined_objective(model, batch, config.lam, soft, config.loss_kind, theta,
                                     dropout=config.dropout, dropout_seed=drop_seed)
            history.clamped += obj.n_clamped
            theta, state = adam_step(theta, obj.grad, state, config.learning_rate,
                                     config.weight_decay)
            total += obj.value * len(idx)
            count += len(idx)
        val, val_base, val_dcal = validation_loss(model, split.validation, config, theta)
        history.train_loss.append(total / count)
        history.val_loss.append(val)
        history.val_base.append(val_base)
        history.val_dcal.append(val_dcal)
        log.debug("epoch %d train %.5f val %.5f dcal %.5f", epoch, total / count, val, val_dcal)
        if np.isfinite(val):
            bad = 0
            if val < best:
                best, best_theta = val, theta.copy()
                history.selected_epoch = epoch
        else:
            bad += 1
            if bad >= 2:
                history.skipped_steps = state.skipped
                raise TrainingDiverged(f"validation loss non-finite at epoch {epoch}", history)
    history.skipped_steps = state.skipped
    model.theta = best_theta
    return model, history


SWEEP_COLUMNS = ("family", "loss", "lam", "nll", "dcal", "concordance", "seed", "error")


def run_one(config: TrainConfig, split: Split) -> dict:
    """Train and evaluate one ``(lambda, seed)`` configuration on the test part."""
    row = {"family": config.family, "loss": config.loss_kind, "lam": config.lam,
           "seed": config.seed, "nll": None, "dcal": None, "concordance": None, "error": ""}
    try:
        model, _ = train(config, split)
        rep = evaluate(model, split.test, config.bins)
        row.update(nll=rep.test_nll, dcal=rep.dcal, concordance=rep.concordance)
    except (TrainingDiverged, FloatingPointError, ValueError) as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def sweep_configs(base: TrainConfig, lams: Sequence[float], seeds: Sequence[int],
                  families: Sequence[str] | None = None) -> list[TrainConfig]:
    if not lams or not seeds:
        raise ConfigError("lambda and seed lists must be nonempty")
    families = families or [base.family]
    return [replace(base, family=f, lam=float(lam), seed=int(s))
            for f in families for lam in lams for s in seeds]


def run_sweep(base: TrainConfig, lams, seeds, split: Split, families=None) -> list[dict]:
    """One train+evaluate run per (family, lambda, seed); failures are recorded
    in the ``error`` column and the sweep continues."""
    return [run_one(cfg, split) for cfg in sweep_configs(base, lams, seeds, families)]
