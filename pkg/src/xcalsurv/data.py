"""Right-censored survival data: observations, datasets, bin schemes, splits
and seeded minibatching."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed or invalid survival data."""


@dataclass(frozen=True)
class Observation:
    covariates: np.ndarray
    time: float
    event: bool


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented, read-only collection of observations.

    ``x`` is ``(n, d)``, ``time`` is ``(n,)`` observed times ``u = min(t, c)``
    and ``event`` is ``(n,)`` booleans (True when the failure was observed).
    """

    x: np.ndarray
    time: np.ndarray
    event: np.ndarray
    name: str = "data"

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64, copy=True)
        time = np.array(self.time, dtype=np.float64, copy=True)
        event = np.array(self.event, dtype=bool, copy=True)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.ndim != 2:
            raise DataError("covariates must be a 2-d array")
        n = len(time)
        if n == 0:
            raise DataError("dataset is empty")
        if x.shape[0] != n or event.shape != (n,) or time.ndim != 1:
            raise DataError("covariate, time and event lengths differ")
        if not np.all(np.isfinite(x)):
            raise DataError("non-finite covariates")
        if not np.all(np.isfinite(time)) or np.any(time <= 0):
            raise DataError("nonpositive time")
        for arr in (x, time, event):
            arr.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "event", event)

    def __len__(self) -> int:
        return len(self.time)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def censored_fraction(self) -> float:
        return float(1.0 - self.event.mean())

    @property
    def observations(self) -> list[Observation]:
        return [Observation(self.x[i], float(self.time[i]), bool(self.event[i]))
                for i in range(len(self))]

    @classmethod
    def from_observations(cls, observations: Sequence[Observation], name: str = "data") -> "Dataset":
        if not observations:
            raise DataError("dataset is empty")
        dims = {len(o.covariates) for o in observations}
        if len(dims) != 1:
            raise DataError("observations have differing covariate dimension")
        return cls(np.array([o.covariates for o in observations], dtype=np.float64),
                   np.array([o.time for o in observations]),
                   np.array([o.event for o in observations]), name=name)

    def subset(self, index: np.ndarray, name: str | None = None) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.x[index], self.time[index], self.event[index],
                       name=name or self.name)


# -- CSV schema ---------------------------------------------------------------

SCHEMAS = ("csv",)


def _fmt(v: float) -> str:
    # repr gives the shortest string that round-trips a double
    return repr(float(v))


def save_dataset(data: Dataset, path: str | Path) -> None:
    path = Path(path)
    header = ["u", "delta"] + [f"x{j + 1}" for j in range(data.dim)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(data)):
            w.writerow([_fmt(data.time[i]), "1" if data.event[i] else "0"]
                       + [_fmt(v) for v in data.x[i]])


def load_dataset(path: str | Path, format: str = "csv", name: str | None = None) -> Dataset:
    """Read a dataset with header ``u,delta,x1,...,xd``; row order is kept."""
    if format not in SCHEMAS:
        raise DataError(f"unknown schema {format!r}")
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError("empty file")
    header = [h.strip() for h in rows[0]]
    d = len(header) - 2
    if header[:2] != ["u", "delta"] or d < 1 or header[2:] != [f"x{j + 1}" for j in range(d)]:
        raise DataError(f"bad header {header!r}; expected u,delta,x1,...,xd")
    times, events, covs = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"line {lineno}: expected {len(header)} columns, got {len(row)}")
        try:
            u = float(row[0])
            x = [float(v) for v in row[2:]]
        except ValueError:
            raise DataError(f"line {lineno}: non-numeric value") from None
        if row[1].strip() not in ("0", "1"):
            raise DataError(f"line {lineno}: delta must be 0 or 1")
        if not u > 0:
            raise DataError(f"line {lineno}: nonpositive time")
        times.append(u)
        events.append(row[1].strip() == "1")
        covs.append(x)
    if not times:
        raise DataError("dataset is empty")
    return Dataset(np.array(covs), np.array(times), np.array(events),
                   name=name or path.stem)


# -- bins ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BinScheme:
    """Disjoint contiguous cover of [0, 1].

    Hard membership is half-open ``[a, b)`` except the last bin, which is
    closed. For soft membership the first bin's left edge is replaced by
    ``soft_lower_extension`` and the last bin's right edge by
    ``soft_upper_extension``.
    """

    edges: np.ndarray
    soft_lower_extension: float = -1.0
    soft_upper_extension: float = 2.0

    def __post_init__(self):
        edges = np.array(self.edges, dtype=np.float64, copy=True)
        if edges.ndim != 1 or len(edges) < 3:
            raise ValueError("need at least two bins")
        if edges[0] != 0.0 or edges[-1] != 1.0:
            raise ValueError("bin edges must run from 0 to 1")
        if np.any(np.diff(edges) <= 0):
            raise ValueError("bin edges must be strictly ascending")
        if not (self.soft_lower_extension < 0 and self.soft_upper_extension > 1):
            raise ValueError("extensions must lie outside [0, 1]")
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)

    @classmethod
    def equal(cls, n_bins: int = 20, **kw) -> "BinScheme":
        return cls(np.linspace(0.0, 1.0, n_bins + 1), **kw)

    @property
    def n_bins(self) -> int:
        return len(self.edges) - 1

    @property
    def lower(self) -> np.ndarray:
        return self.edges[:-1]

    @property
    def upper(self) -> np.ndarray:
        return self.edges[1:]

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def soft_lower(self) -> np.ndarray:
        a = self.edges[:-1].copy()
        a[0] = self.soft_lower_extension
        return a

    @property
    def soft_upper(self) -> np.ndarray:
        b = self.edges[1:].copy()
        b[-1] = self.soft_upper_extension
        return b

    def assign(self, values: np.ndarray) -> np.ndarray:
        """Hard bin index of each value in [0, 1]."""
        idx = np.searchsorted(self.edges, values, side="right") - 1
        return np.clip(idx, 0, self.n_bins - 1)

    def to_dict(self) -> dict:
        return {"edges": [float(e) for e in self.edges],
                "soft_lower_extension": self.soft_lower_extension,
                "soft_upper_extension": self.soft_upper_extension}

    @classmethod
    def from_dict(cls, d: dict) -> "BinScheme":
        return cls(np.array(d["edges"]), d.get("soft_lower_extension", -1.0),
                   d.get("soft_upper_extension", 2.0))


# -- splits and batches -------------------------------------------------------

@dataclass(frozen=True)
class Split:
    train: Dataset
    validation: Dataset
    test: Dataset
    indices: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        return {k: [int(i) for i in v] for k, v in self.indices.items()}


def split_indices(n: int, fractions: Sequence[float], seed: int) -> dict[str, np.ndarray]:
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError("fractions must be three nonnegative reals summing to 1")
    n_val = int(np.floor(n * fractions[1]))
    n_test = int(np.floor(n * fractions[2]))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) <= 0:
        raise DataError("empty part in split")
    perm = np.random.default_rng(seed).permutation(n)
    return {"train": perm[:n_train],
            "validation": perm[n_train:n_train + n_val],
            "test": perm[n_train + n_val:]}


def split_dataset(data: Dataset, fractions: Sequence[float] = (0.5, 0.25, 0.25),
                  seed: int = 0) -> Split:
    """Seeded shuffle then partition; floor-rounded sizes, remainder to train."""
    idx = split_indices(len(data), fractions, seed)
    return split_from_manifest(data, idx)


def split_from_manifest(data: Dataset, manifest: dict) -> Split:
    idx = {k: np.asarray(manifest[k], dtype=np.int64) for k in ("train", "validation", "test")}
    return Split(data.subset(idx["train"], f"{data.name}/train"),
                 data.subset(idx["validation"], f"{data.name}/validation"),
                 data.subset(idx["test"], f"{data.name}/test"), idx)


def save_split_manifest(split: Split, path: str | Path) -> None:
    Path(path).write_text(json.dumps(split.manifest()) + "\n")


def load_split_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def make_batches(n: int | Dataset, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Index batches for one epoch; a fresh permutation per ``(seed, epoch)``.

    The final short batch is kept.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2")
    if isinstance(n, Dataset):
        n = len(n)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def iter_batches(data: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[Dataset]:
    for idx in make_batches(len(data), batch_size, seed, epoch):
        yield data.subset(idx)
