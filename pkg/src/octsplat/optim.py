"""Adaptive-moment optimizers for dense weight dicts and for sparse octree logit tables."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .octree import LogitGrads, OctreeDensity


@dataclass
class Adam:
    """Adam with decoupled weight decay over a dict of named arrays (updated in place)."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for k, g in grads.items():
            p = params[k]
            m = self.m.setdefault(k, np.zeros_like(p))
            v = self.v.setdefault(k, np.zeros_like(p))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            if self.weight_decay:
                p *= 1 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class OctreeAdam:
    """Adam over the octree's per-level logit tables.

    Cells get instantiated lazily, so moment buffers are kept alongside the
    table paths and re-aligned (new rows start at zero) whenever a table grows.
    """
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    state: dict = field(default_factory=dict)   # level -> (paths, m, v)

    def _aligned(self, level: int, paths: np.ndarray):
        old = self.state.get(level)
        m, v = np.zeros((len(paths), 8)), np.zeros((len(paths), 8))
        if old is not None and len(old[0]):
            pos = np.searchsorted(paths, old[0])
            m[pos], v[pos] = old[1], old[2]
        return m, v

    def step(self, d: OctreeDensity, grads: LogitGrads) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for level, (paths, _) in grads.items():
            d.tables[level].ensure(paths)
        dense = grads.dense(d)
        for level, t in enumerate(d.tables):
            if not len(t.paths):
                continue
            m, v = self._aligned(level, t.paths)
            g = dense[level]
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            t.logits -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            self.state[level] = (t.paths.copy(), m, v)
