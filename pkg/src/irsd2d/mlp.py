"""Numpy multilayer perceptrons with hand-written backpropagation.

Two networks are built on :class:`Mlp`: a diagonal-Gaussian policy whose
samples are squashed into a box of action bounds, and a scalar value
function.  Gradients are returned as lists of arrays aligned with
``params`` and always point in the ascent direction of whatever objective
the caller differentiated.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
LOG_STD_MIN = math.log(1e-3)
LOG_STD_MAX = math.log(2.0)
CHECKPOINT_FORMAT = "irsd2d-mlp/1"


class StaleCacheError(RuntimeError):
    """backward() was handed activations from an older parameter version."""


def orthogonal(shape, gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


@dataclass
class ForwardCache:
    inputs: list  # input of each layer
    hidden: list  # tanh outputs of each hidden layer
    version: int


class Mlp:
    """Fully connected tanh network with a linear output layer.

    Weights are stored as ``(fan_in, fan_out)`` so a batch ``x`` of shape
    ``(B, fan_in)`` maps through ``x @ W + b``.
    """

    def __init__(self, sizes, rng: np.random.Generator | None = None, output_gain: float = 1.0,
                 hidden_gain: float = math.sqrt(2.0)):
        self.sizes = [int(s) for s in sizes]
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        rng = np.random.default_rng() if rng is None else rng
        self.params: list[np.ndarray] = []
        n_layers = len(self.sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            gain = output_gain if i == n_layers - 1 else hidden_gain
            if fan_in and fan_out:
                w = orthogonal((fan_in, fan_out), gain, rng)
            else:
                w = np.zeros((fan_in, fan_out))
            self.params += [w, np.zeros(fan_out)]
        self.version = 0

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def layers(self):
        return [(self.params[2 * i], self.params[2 * i + 1]) for i in range(self.n_layers)]

    def touch(self):
        """Mark parameters as modified so older forward caches are rejected."""
        self.version += 1

    def forward(self, x) -> tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"expected input of size {self.sizes[0]}, got {x.shape[-1]}")
        inputs, hidden = [], []
        h = x
        for i, (w, b) in enumerate(self.layers()):
            inputs.append(h)
            h = h @ w + b
            if i < self.n_layers - 1:
                h = np.tanh(h)
                hidden.append(h)
        out = h[0] if squeeze else h
        return out, ForwardCache(inputs, hidden, self.version)

    def backward(self, cache: ForwardCache, grad_out) -> list[np.ndarray]:
        """Parameter gradients given d(objective)/d(output) for the cached batch."""
        if cache.version != self.version:
            raise StaleCacheError("forward cache predates the latest parameter update")
        g = np.asarray(grad_out, dtype=float)
        if g.ndim == 1:
            g = g[None, :]
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        for i in reversed(range(self.n_layers)):
            w, _ = self.layers()[i]
            grads[2 * i] = cache.inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = (g @ w.T) * (1.0 - cache.hidden[i - 1] ** 2)
        return grads

    def to_dict(self) -> dict:
        return {
            "layer_sizes": self.sizes,
            "activation": "tanh",
            "layers": [
                {"weight_shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist()}
                for w, b in self.layers()
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Mlp":
        net = cls(data["layer_sizes"], rng=np.random.default_rng(0))
        for i, layer in enumerate(data["layers"]):
            w = np.asarray(layer["weight"], dtype=float).reshape(layer["weight_shape"])
            b = np.asarray(layer["bias"], dtype=float)
            if w.shape != net.params[2 * i].shape or b.shape != net.params[2 * i + 1].shape:
                raise ValueError(f"layer {i} shape does not match layer_sizes")
            net.params[2 * i], net.params[2 * i + 1] = w, b
        return net


def gaussian_log_prob(mean, log_std, action_raw) -> np.ndarray:
    """Diagonal Gaussian log-density of pre-squash actions (summed over the last axis)."""
    mean = np.asarray(mean, dtype=float)
    log_std = np.asarray(log_std, dtype=float)
    z = (np.asarray(action_raw, dtype=float) - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z**2 - log_std - 0.5 * LOG_2PI, axis=-1)


def sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(u, dtype=float)))


class BoxSquash:
    """Smooth bijection from R^d onto the open box ``(low, high)``.

    Dimensions flagged in ``log_scale`` are interpolated geometrically
    (uniform in dB), which suits transmit powers spanning many decades.
    """

    def __init__(self, low, high, log_scale=None):
        self.low = np.asarray(low, dtype=float).reshape(-1)
        self.high = np.asarray(high, dtype=float).reshape(-1)
        if self.low.shape != self.high.shape or np.any(self.high <= self.low):
            raise ValueError("need low < high elementwise")
        self.log_scale = (np.zeros(self.low.shape, dtype=bool) if log_scale is None
                          else np.asarray(log_scale, dtype=bool).reshape(-1))
        if self.log_scale.shape != self.low.shape:
            raise ValueError("log_scale mask must match the bounds")
        if np.any(self.low[self.log_scale] <= 0):
            raise ValueError("log-scaled dimensions need positive bounds")
        # interpolate in log space where flagged
        safe_low = np.where(self.log_scale, self.low, 1.0)
        safe_high = np.where(self.log_scale, self.high, 2.0)
        self._lo = np.where(self.log_scale, np.log(safe_low), self.low)
        self._width = np.where(self.log_scale, np.log(safe_high) - np.log(safe_low), self.high - self.low)

    @property
    def dim(self) -> int:
        return self.low.size

    def __call__(self, u):
        x = self._lo + self._width * sigmoid(u)
        return np.where(self.log_scale, np.exp(x), x)

    def inverse(self, a):
        a = np.asarray(a, dtype=float)
        x = np.where(self.log_scale, np.log(np.where(self.log_scale, a, 1.0)), a)
        s = (x - self._lo) / self._width
        return np.log(s) - np.log1p(-s)

    def log_abs_det_jacobian(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        # log s(u) + log(1 - s(u)) = -softplus(-u) - softplus(u)
        log_s = -np.logaddexp(0.0, -u)
        log_1ms = -np.logaddexp(0.0, u)
        per_dim = np.log(self._width) + log_s + log_1ms
        # d exp(x)/dx = exp(x) on log-scaled dimensions
        per_dim = per_dim + np.where(self.log_scale, self._lo + self._width * sigmoid(u), 0.0)
        return np.sum(per_dim, axis=-1)

    def log_prob(self, mean, log_std, u) -> np.ndarray:
        """Log-density of the squashed action ``self(u)``."""
        return gaussian_log_prob(mean, log_std, u) - self.log_abs_det_jacobian(u)


class GaussianPolicy:
    """State-conditioned mean network plus state-independent log-stds."""

    def __init__(self, obs_size: int, low, high, hidden=(128, 64), rng: np.random.Generator | None = None,
                 init_std: float = 0.5, log_scale=None):
        self.squash = BoxSquash(low, high, log_scale)
        self.net = Mlp([obs_size, *hidden, self.squash.dim], rng=rng, output_gain=0.01)
        self.log_std = np.full(self.squash.dim, math.log(init_std))
        self.clamp_log_std()

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params + [self.log_std]

    @property
    def action_dim(self) -> int:
        return self.squash.dim

    def clamp_log_std(self):
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)

    def touch(self):
        self.clamp_log_std()
        self.net.touch()

    def mean(self, obs):
        return self.net.forward(obs)

    def sample(self, obs, rng: np.random.Generator):
        """Returns (raw action, log-prob of the raw action, squashed action)."""
        mean, _ = self.net.forward(obs)
        u = mean + np.exp(self.log_std) * rng.standard_normal(mean.shape)
        return u, float(gaussian_log_prob(mean, self.log_std, u)), self.squash(u)

    def deterministic(self, obs) -> np.ndarray:
        mean, _ = self.net.forward(obs)
        return self.squash(mean)

    def log_prob(self, obs, u) -> np.ndarray:
        mean, _ = self.net.forward(obs)
        return gaussian_log_prob(mean, self.log_std, u)


class ValueFunction:
    def __init__(self, obs_size: int, hidden=(128, 64), rng: np.random.Generator | None = None):
        self.net = Mlp([obs_size, *hidden, 1], rng=rng, output_gain=1.0)

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params

    def touch(self):
        self.net.touch()

    def __call__(self, obs) -> np.ndarray:
        out, _ = self.net.forward(obs)
        return out[..., 0]


def sgd_update(params: list[np.ndarray], grads: list[np.ndarray], learning_rate: float) -> list[np.ndarray]:
    """In-place gradient ascent step ``p += lr * g``; returns ``params``."""
    if len(params) != len(grads):
        raise ValueError("parameter / gradient count mismatch")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ValueError(f"shape mismatch {p.shape} vs {np.shape(g)}")
        p += learning_rate * g
    return params


class Sgd:
    def __init__(self, params, learning_rate: float):
        self.params = params
        self.learning_rate = learning_rate

    def step(self, grads):
        sgd_update(self.params, grads, self.learning_rate)


class Adam:
    """Adaptive-moment ascent; available but not the default optimizer."""

    def __init__(self, params, learning_rate: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p += self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, params, learning_rate: float):
    if name == "sgd":
        return Sgd(params, learning_rate)
    if name == "adam":
        return Adam(params, learning_rate)
    raise ValueError(f"unknown optimizer {name!r} (expected 'sgd' or 'adam')")


def flatten(arrays) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)


def unflatten_into(arrays, flat) -> None:
    i = 0
    for a in arrays:
        a[...] = np.reshape(flat[i:i + a.size], a.shape)
        i += a.size
    if i != len(flat):
        raise ValueError("flat vector length does not match parameters")


def save_checkpoint(path, policy: GaussianPolicy, value: ValueFunction, extra: dict | None = None) -> None:
    """Write both networks as JSON.

    Layout: ``{"format", "policy": {layer_sizes, activation, layers: [{weight_shape,
    weight (row-major, fan_in x fan_out), bias}], log_std, low, high}, "value": {...},
    "extra": {...}}``.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "policy": {**policy.net.to_dict(), "log_std": policy.log_std.tolist(),
                   "low": policy.squash.low.tolist(), "high": policy.squash.high.tolist(),
                   "log_scale": policy.squash.log_scale.tolist()},
        "value": value.net.to_dict(),
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    p = doc["policy"]
    sizes = p["layer_sizes"]
    policy = GaussianPolicy(sizes[0], p["low"], p["high"], hidden=tuple(sizes[1:-1]), rng=np.random.default_rng(0),
                            log_scale=p.get("log_scale"))
    policy.net = Mlp.from_dict(p)
    policy.log_std = np.asarray(p["log_std"], dtype=float)
    value = ValueFunction(sizes[0], hidden=tuple(doc["value"]["layer_sizes"][1:-1]), rng=np.random.default_rng(0))
    value.net = Mlp.from_dict(doc["value"])
    return policy, value, doc.get("extra", {})
