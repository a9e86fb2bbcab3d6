"""Small fully connected Q-network in numpy, with backprop and Adam."""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np


class TrainingFault(RuntimeError):
    """Parameters became non-finite during an update."""


class QNetwork:
    """ReLU hidden layers, identity output.  ``widths`` = (in, h1, ..., out)."""

    def __init__(self, widths: Sequence[int], rng: Optional[np.random.Generator] = None):
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError("need at least input and output widths, all >= 1")
        self.widths = tuple(int(w) for w in widths)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.W: List[np.ndarray] = []
        self.b: List[np.ndarray] = []
        for n_in, n_out in zip(self.widths[:-1], self.widths[1:]):
            self.W.append(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out)))
            self.b.append(np.zeros(n_out))

    @property
    def n_actions(self) -> int:
        return self.widths[-1]

    def params(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.W, self.b):
            out.extend((w, b))
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self._activations(np.asarray(x, dtype=float))[-1]

    __call__ = forward

    def _activations(self, x: np.ndarray) -> List[np.ndarray]:
        acts = [x]
        h = x
        last = len(self.W) - 1
        for k, (w, b) in enumerate(zip(self.W, self.b)):
            h = h @ w + b
            if k < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return acts

    def copy(self) -> "QNetwork":
        net = QNetwork.__new__(QNetwork)
        net.widths = self.widths
        net.W = [w.copy() for w in self.W]
        net.b = [b.copy() for b in self.b]
        return net

    def load_from(self, other: "QNetwork") -> None:
        if other.widths != self.widths:
            raise ValueError("layer widths differ")
        for dst, src in zip(self.params(), other.params()):
            dst[...] = src

    def is_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params())

    def to_dict(self) -> dict:
        return {"widths": list(self.widths),
                "W": [w.tolist() for w in self.W],
                "b": [b.tolist() for b in self.b]}

    @classmethod
    def from_dict(cls, data: dict) -> "QNetwork":
        net = cls.__new__(cls)
        net.widths = tuple(data["widths"])
        net.W = [np.asarray(w, dtype=float) for w in data["W"]]
        net.b = [np.asarray(b, dtype=float) for b in data["b"]]
        for k, (w, b) in enumerate(zip(net.W, net.b)):
            if w.shape != (net.widths[k], net.widths[k + 1]) or b.shape != (net.widths[k + 1],):
                raise ValueError("parameter shapes do not match widths")
        return net


def batch_gradient(net: QNetwork, obs: np.ndarray, actions: np.ndarray,
                   targets: np.ndarray) -> List[np.ndarray]:
    """Gradient of mean_i 1/2 (Q(obs_i, a_i) - y_i)^2, ordered like ``net.params()``."""
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    actions = np.asarray(actions, dtype=int).reshape(-1)
    targets = np.asarray(targets, dtype=float).reshape(-1)
    n = obs.shape[0]
    acts = net._activations(obs)
    delta = np.zeros_like(acts[-1])
    delta[np.arange(n), actions] = (acts[-1][np.arange(n), actions] - targets) / n
    grads: List[np.ndarray] = [None] * (2 * len(net.W))
    for k in range(len(net.W) - 1, -1, -1):
        grads[2 * k] = acts[k].T @ delta
        grads[2 * k + 1] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ net.W[k].T) * (acts[k] > 0)
    return grads


def backprop_gradient(net: QNetwork, obs: np.ndarray, action: int, y: float) -> List[np.ndarray]:
    """Gradient of 1/2 (Q(obs, action) - y)^2 for one sample."""
    return batch_gradient(net, np.asarray(obs, dtype=float)[None, :], np.array([action]),
                          np.array([y]))


class Adam:
    def __init__(self, params: List[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: List[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_by_global_norm(grads: List[np.ndarray], max_norm: float) -> List[np.ndarray]:
    if max_norm <= 0:
        return grads
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if norm > max_norm:
        return [g * (max_norm / norm) for g in grads]
    return grads
