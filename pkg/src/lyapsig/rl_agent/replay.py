"""Experience tuples and a bounded ring replay buffer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np


@dataclass(frozen=True)
class Experience:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    terminal: bool = False


class ReplayBuffer:
    """Fixed-capacity ring; the oldest experience is overwritten first."""

    def __init__(self, capacity: int, obs_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs_dim = obs_dim
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros(capacity, dtype=int)
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, obs_dim))
        self.terminal = np.zeros(capacity, dtype=bool)
        self._next = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, exp: Experience) -> None:
        if len(exp.s) != self.obs_dim or len(exp.s_next) != self.obs_dim:
            raise ValueError("observation length does not match the buffer")
        i = self._next
        self.s[i] = exp.s
        self.a[i] = exp.a
        self.r[i] = exp.r
        self.s_next[i] = exp.s_next
        self.terminal[i] = exp.terminal
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Tuple[np.ndarray, ...]:
        """Uniform sample with replacement: (s, a, r, s_next, terminal)."""
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.terminal[idx]

    def oldest(self) -> Experience:
        i = self._next if self.size == self.capacity else 0
        return Experience(self.s[i].copy(), int(self.a[i]), float(self.r[i]),
                          self.s_next[i].copy(), bool(self.terminal[i]))
