"""Feedforward rectifier networks over a flat parameter vector.

The parameter vector is a plain 1-d float array; :class:`Parameterization`
owns the layout that maps ``(layer, kind)`` to slices of it. Gradients come
from a hand-written reverse pass over the fixed layer chain.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class Parameterization:
    """Affine layers with rectifiers between them.

    ``hidden=()`` gives a linear (affine) map. Dropout, when used, follows
    each hidden activation.
    """

    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = ()
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("layer sizes must be positive")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def layout(self) -> dict[tuple[int, str], slice]:
        out, pos = {}, 0
        sizes = self.sizes
        for layer in range(len(sizes) - 1):
            fan_in, fan_out = sizes[layer], sizes[layer + 1]
            out[(layer, "weight")] = slice(pos, pos + fan_in * fan_out)
            pos += fan_in * fan_out
            out[(layer, "bias")] = slice(pos, pos + fan_out)
            pos += fan_out
        return out

    @property
    def n_params(self) -> int:
        sizes = self.sizes
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))

    def unpack(self, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """``(W, b)`` views per layer; ``W`` has shape ``(fan_in, fan_out)``."""
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        sizes, lay = self.sizes, self.layout
        return [(theta[lay[(k, "weight")]].reshape(sizes[k], sizes[k + 1]),
                 theta[lay[(k, "bias")]])
                for k in range(len(sizes) - 1)]

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "output_dim": self.output_dim,
                "hidden": list(self.hidden), "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "Parameterization":
        return cls(d["input_dim"], d["output_dim"], tuple(d.get("hidden", ())),
                   d.get("activation", "relu"))

    def layout_descriptor(self) -> list[dict]:
        return [{"layer": k, "kind": kind, "start": s.start, "stop": s.stop}
                for (k, kind), s in self.layout.items()]


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]   # input to each affine layer
    pre: list[np.ndarray]      # pre-activations of hidden layers
    masks: list[np.ndarray | None]


def init_params(p: Parameterization, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(p.n_params)
    sizes, lay = p.sizes, p.layout
    for k in range(len(sizes) - 1):
        bound = np.sqrt(6.0 / (sizes[k] + sizes[k + 1]))
        sl = lay[(k, "weight")]
        theta[sl] = rng.uniform(-bound, bound, size=sl.stop - sl.start)
    return theta


def forward_with_cache(p: Parameterization, theta: np.ndarray, x: np.ndarray,
                       dropout: float = 0.0,
                       rng: np.random.Generator | None = None) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x.reshape(1, -1) if squeeze else x
    if h.shape[1] != p.input_dim:
        raise ValueError(f"input has dimension {h.shape[1]}, expected {p.input_dim}")
    layers = p.unpack(theta)
    inputs, pre, masks = [], [], []
    for k, (W, b) in enumerate(layers):
        inputs.append(h)
        z = h @ W + b
        if k == len(layers) - 1:
            h = z
            break
        pre.append(z)
        h = np.maximum(z, 0.0)
        mask = None
        if dropout > 0.0:
            if rng is None:
                raise ValueError("dropout needs an rng")
            mask = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
            h = h * mask
        masks.append(mask)
    if not np.all(np.isfinite(h)):
        raise FloatingPointError("non-finite network output")
    out = h[0] if squeeze else h
    return out, ForwardCache(inputs, pre, masks)


def forward(p: Parameterization, theta: np.ndarray, x: np.ndarray, **kw) -> np.ndarray:
    return forward_with_cache(p, theta, x, **kw)[0]


def backward(p: Parameterization, theta: np.ndarray, x: np.ndarray | None,
             upstream: np.ndarray, cache: ForwardCache | None = None) -> np.ndarray:
    """Gradient of ``sum(upstream * forward(x))`` with respect to ``theta``.

    Rectifier subgradient at 0 is 0.
    """
    if cache is None:
        _, cache = forward_with_cache(p, theta, x)
    g = np.asarray(upstream, dtype=np.float64)
    if g.ndim == 1:
        g = g.reshape(1, -1)
    if g.shape[1] != p.output_dim:
        raise ValueError(f"upstream has length {g.shape[1]}, expected {p.output_dim}")
    layers = p.unpack(theta)
    grad = np.zeros_like(theta)
    lay = p.layout
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        grad[lay[(k, "weight")]] = (cache.inputs[k].T @ g).ravel()
        grad[lay[(k, "bias")]] = g.sum(axis=0)
        if k == 0:
            break
        g = g @ W.T
        if cache.masks[k - 1] is not None:
            g = g * cache.masks[k - 1]
        g = g * (cache.pre[k - 1] > 0.0)
    return grad


def finite_difference_gradient(f: Callable[[np.ndarray], float], theta: np.ndarray,
                               eps: float = 1e-6) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta = np.array(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    for i in range(len(theta)):
        old = theta[i]
        theta[i] = old + eps
        fp = f(theta)
        theta[i] = old - eps
        fm = f(theta)
        theta[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad


def save_params(theta: np.ndarray, layout: dict, path_prefix: str | Path) -> None:
    """Write ``<prefix>.npy`` (flat values) and ``<prefix>.json`` (layout)."""
    path_prefix = Path(path_prefix)
    np.save(path_prefix.with_suffix(".npy"), np.asarray(theta, dtype=np.float64))
    path_prefix.with_suffix(".json").write_text(json.dumps(layout, indent=2, sort_keys=True) + "\n")


def load_params(path_prefix: str | Path) -> tuple[np.ndarray, dict]:
    path_prefix = Path(path_prefix)
    theta = np.load(path_prefix.with_suffix(".npy"), allow_pickle=False)
    layout = json.loads(path_prefix.with_suffix(".json").read_text())
    if theta.ndim != 1 or not np.all(np.isfinite(theta)):
        raise ValueError("corrupted parameter array")
    return theta, layout
