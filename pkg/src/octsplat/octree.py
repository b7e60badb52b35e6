"""Sparse octree-factorized spatial density: log-probabilities, cross-entropy against a
leaf histogram, and batched ancestral sampling with systematic child allocation.

Cell paths are integers: the root is 0 and child k of cell c is 8*c + k, with
k = bx + 2*by + 4*bz selecting the half along each axis.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax

from .rng import draw_key, hash_uniform


class InvalidPath(ValueError):
    pass


class DegenerateProbs(ValueError):
    pass


class EmptyPointSet(ValueError):
    pass


@dataclass
class LevelTable:
    paths: np.ndarray   # sorted int64 parent-cell paths at this level
    logits: np.ndarray  # (n, 8)

    @classmethod
    def empty(cls) -> "LevelTable":
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, 8)))

    def find(self, paths):
        """Row index per path, -1 when the cell has not been instantiated."""
        paths = np.asarray(paths, dtype=np.int64)
        pos = np.searchsorted(self.paths, paths)
        pos_c = np.minimum(pos, max(len(self.paths) - 1, 0))
        hit = (pos < len(self.paths)) & (self.paths[pos_c] == paths) if len(self.paths) else np.zeros(paths.shape, bool)
        return np.where(hit, pos_c, -1)

    def ensure(self, paths) -> None:
        new = np.setdiff1d(np.asarray(paths, dtype=np.int64), self.paths)
        if len(new):
            merged = np.concatenate([self.paths, new])
            order = np.argsort(merged, kind="stable")
            self.paths = merged[order]
            self.logits = np.concatenate([self.logits, np.zeros((len(new), 8))])[order]


@dataclass
class OctreeDensity:
    levels: int
    domain_min: np.ndarray = field(default_factory=lambda: -np.ones(3))
    domain_max: np.ndarray = field(default_factory=lambda: np.ones(3))
    tables: list[LevelTable] = None
    eval_count: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("octree needs at least one level")
        self.domain_min = np.asarray(self.domain_min, dtype=float).reshape(3)
        self.domain_max = np.asarray(self.domain_max, dtype=float).reshape(3)
        if self.tables is None:
            self.tables = [LevelTable.empty() for _ in range(self.levels)]

    def logits_for(self, level: int, paths) -> np.ndarray:
        """8 child logits for each parent cell at `level` (zeros = uniform when absent)."""
        t = self.tables[level]
        rows = t.find(paths)
        out = np.zeros((len(rows), 8))
        ok = rows >= 0
        out[ok] = t.logits[rows[ok]]
        return out

    def set_logits(self, level: int, path: int, logits) -> None:
        t = self.tables[level]
        t.ensure([path])
        t.logits[t.find([path])[0]] = np.asarray(logits, dtype=float)

    def add(self, grads: "LogitGrads", scale: float = 1.0) -> None:
        for level, (paths, g) in grads.items():
            t = self.tables[level]
            t.ensure(paths)
            t.logits[t.find(paths)] += scale * g

    @property
    def num_cells(self) -> int:
        return sum(len(t.paths) for t in self.tables)

    def leaf_size(self) -> np.ndarray:
        return (self.domain_max - self.domain_min) / 2**self.levels

    def cell_bounds(self, level: int, paths) -> tuple[np.ndarray, np.ndarray]:
        ijk = path_to_ijk(paths, level)
        size = (self.domain_max - self.domain_min) / 2**level
        lo = self.domain_min + ijk * size
        return lo, lo + size

    def copy(self) -> "OctreeDensity":
        return OctreeDensity(self.levels, self.domain_min.copy(), self.domain_max.copy(),
                             [LevelTable(t.paths.copy(), t.logits.copy()) for t in self.tables])


class LogitGrads(dict):
    """level -> (sorted parent paths, (n, 8) gradient rows)."""

    def accumulate(self, level: int, paths, g) -> None:
        paths = np.asarray(paths, dtype=np.int64)
        g = np.asarray(g, dtype=float).reshape(len(paths), 8)
        if level in self:
            p0, g0 = self[level]
            paths = np.concatenate([p0, paths])
            g = np.concatenate([g0, g])
        up, inv = np.unique(paths, return_inverse=True)
        acc = np.zeros((len(up), 8))
        np.add.at(acc, inv, g)
        self[level] = (up, acc)

    def __add__(self, other: "LogitGrads") -> "LogitGrads":
        out = LogitGrads()
        for src in (self, other):
            for level, (p, g) in src.items():
                out.accumulate(level, p, g)
        return out

    def scaled(self, s: float) -> "LogitGrads":
        out = LogitGrads()
        for level, (p, g) in self.items():
            out[level] = (p.copy(), g * s)
        return out

    def dense(self, d: OctreeDensity) -> list[np.ndarray]:
        """Gradients laid out like `d.tables` (cells must already exist in `d`)."""
        out = [np.zeros_like(t.logits) for t in d.tables]
        for level, (p, g) in self.items():
            rows = d.tables[level].find(p)
            missing = rows < 0
            if np.any(g[missing] != 0):
                raise KeyError(f"gradient for cells absent from level {level}: {np.asarray(p)[missing][:5]}")
            np.add.at(out[level], rows[~missing], g[~missing])
        return out

    def max_abs(self) -> float:
        return max((float(np.abs(g).max()) for _, g in self.values() if g.size), default=0.0)


def path_to_ijk(paths, level: int) -> np.ndarray:
    paths = np.asarray(paths, dtype=np.int64)
    ijk = np.zeros(paths.shape + (3,), dtype=np.int64)
    for l in range(level):
        digit = (paths >> (3 * (level - 1 - l))) & 7
        ijk[..., 0] = ijk[..., 0] * 2 + (digit & 1)
        ijk[..., 1] = ijk[..., 1] * 2 + ((digit >> 1) & 1)
        ijk[..., 2] = ijk[..., 2] * 2 + ((digit >> 2) & 1)
    return ijk


def ijk_to_path(ijk, level: int) -> np.ndarray:
    ijk = np.asarray(ijk, dtype=np.int64)
    path = np.zeros(ijk.shape[:-1], dtype=np.int64)
    for l in range(level):
        shift = level - 1 - l
        digit = ((ijk[..., 0] >> shift) & 1) + 2 * ((ijk[..., 1] >> shift) & 1) + 4 * ((ijk[..., 2] >> shift) & 1)
        path = path * 8 + digit
    return path


def digits_to_path(digits) -> int:
    path = 0
    for k in digits:
        if not 0 <= int(k) < 8:
            raise InvalidPath(f"child digit {k} outside [0, 8)")
        path = path * 8 + int(k)
    return path


def _as_leaf(d: OctreeDensity, leaf) -> int:
    if np.ndim(leaf) == 0:
        leaf = int(leaf)
        if not 0 <= leaf < 8**d.levels:
            raise InvalidPath(f"leaf path {leaf} outside [0, 8^{d.levels})")
        return leaf
    if len(leaf) != d.levels:
        raise InvalidPath(f"leaf needs {d.levels} digits, got {len(leaf)}")
    return digits_to_path(leaf)


def log_prob_many(d: OctreeDensity, leaves) -> np.ndarray:
    """Sum over levels of the per-cell log-softmax term along each leaf's path."""
    leaves = np.asarray(leaves, dtype=np.int64)
    if np.any((leaves < 0) | (leaves >= 8**d.levels)):
        raise InvalidPath("leaf path outside the octree")
    total = np.zeros(leaves.shape, dtype=float)
    for l in range(1, d.levels + 1):
        cell = leaves >> (3 * (d.levels - l))
        lsm = log_softmax(d.logits_for(l - 1, cell >> 3), axis=1)
        total += lsm[np.arange(len(cell)), cell & 7]
    return total


def log_prob(d: OctreeDensity, leaf) -> float:
    return float(log_prob_many(d, [_as_leaf(d, leaf)])[0])


def systematic_counts(n, probs, u) -> np.ndarray:
    """Row-wise systematic allocation of n[i] samples over probs[i] with offset u[i]."""
    n = np.asarray(n, dtype=np.int64)
    probs = np.asarray(probs, dtype=float)
    cum = np.cumsum(probs, axis=-1)
    cum[..., -1] = 1.0
    # number of grid points (u + m) / n, m = 0..n-1, lying below each cumulative edge
    below = np.ceil(n[..., None] * cum - np.asarray(u, dtype=float)[..., None])
    below = np.clip(below, 0, n[..., None]).astype(np.int64)
    below[..., -1] = n
    return np.diff(below, axis=-1, prepend=0)


def systematic_allocate(n: int, probs, u: float) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    if np.any(probs < 0):
        raise DegenerateProbs("negative probability")
    if n < 0:
        raise ValueError("count must be nonnegative")
    return systematic_counts(np.array(n), probs, np.array(u))


@dataclass
class AnchorSet:
    positions: np.ndarray     # (P, 3)
    leaf_indices: np.ndarray  # (P,) leaf paths
    log_prob: np.ndarray      # (P,)
    levels: int

    def __len__(self):
        return len(self.positions)


def sample_anchors(d: OctreeDensity, P: int, rng: np.random.Generator, deterministic: bool = False) -> AnchorSet:
    """Ancestral sampling over an active-cell frontier.

    Only cells holding at least one sample are expanded; each distributes its
    count over its 8 children by systematic sampling with an offset hashed from
    (call key, level, path). Leaves are dequantized uniformly inside their box,
    or placed at the box center when `deterministic`.
    """
    if P < 1:
        raise ValueError("need at least one anchor")
    key = draw_key(rng)
    paths = np.zeros(1, dtype=np.int64)
    counts = np.array([P], dtype=np.int64)
    logp = np.zeros(1)
    for level in range(d.levels):
        logits = d.logits_for(level, paths)
        d.eval_count += len(paths)
        logD = log_softmax(logits, axis=1)
        u = hash_uniform(key, level, paths)
        child = systematic_counts(counts, np.exp(logD), u)
        rows, ks = np.nonzero(child)
        logp = logp[rows] + logD[rows, ks]
        counts = child[rows, ks]
        paths = paths[rows] * 8 + ks

    leaf = np.repeat(paths, counts)
    lp = np.repeat(logp, counts)
    lo, hi = d.cell_bounds(d.levels, leaf)
    if deterministic:
        pos = 0.5 * (lo + hi)
    else:
        local = np.arange(len(leaf)) - np.repeat(np.cumsum(counts) - counts, counts)
        u3 = hash_uniform(key ^ 0x5DEECE66D, leaf[:, None], local[:, None], np.arange(3)[None, :])
        pos = lo + u3 * (hi - lo)
    return AnchorSet(pos, leaf, lp, d.levels)


@dataclass
class TargetHistogram:
    paths: np.ndarray    # sorted unique leaf paths
    weights: np.ndarray  # probability mass per leaf
    levels: int
    clamped: int = 0     # points pulled in from outside the domain

    def marginal(self, level: int) -> tuple[np.ndarray, np.ndarray]:
        cells = self.paths >> (3 * (self.levels - level))
        uc, inv = np.unique(cells, return_inverse=True)
        return uc, np.bincount(inv, weights=self.weights)


def histogram_from_points(points, levels: int, domain_min, domain_max) -> TargetHistogram:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyPointSet("no surface points")
    lo = np.asarray(domain_min, dtype=float)
    hi = np.asarray(domain_max, dtype=float)
    res = 2**levels
    ijk = np.floor((points - lo) / (hi - lo) * res).astype(np.int64)
    outside = np.any((ijk < 0) | (ijk >= res), axis=1)
    n_out = int(outside.sum())
    if n_out:
        warnings.warn(f"{n_out} points outside the octree domain were clamped")
    ijk = np.clip(ijk, 0, res - 1)
    paths, counts = np.unique(ijk_to_path(ijk, levels), return_counts=True)
    return TargetHistogram(paths, counts / counts.sum(), levels, n_out)


def ce_loss(d: OctreeDensity, target: TargetHistogram) -> tuple[float, LogitGrads]:
    """Level-decomposed cross-entropy -sum_l sum_cells p(cell) log q(cell | parent)
    with its gradient on the parent logits (only cells carrying target mass)."""
    if target.levels != d.levels:
        raise ValueError("histogram and density depth differ")
    loss = 0.0
    grads = LogitGrads()
    for l in range(1, d.levels + 1):
        cells, mass = target.marginal(l)
        parents, pinv = np.unique(cells >> 3, return_inverse=True)
        Pm = np.zeros((len(parents), 8))
        Pm[pinv, cells & 7] = mass
        logits = d.logits_for(l - 1, parents)
        lsm = log_softmax(logits, axis=1)
        loss -= float(np.sum(Pm * lsm))
        grads[l - 1] = (parents, Pm.sum(axis=1, keepdims=True) * np.exp(lsm) - Pm)
    return loss, grads


def ce_loss_joint(d: OctreeDensity, target: TargetHistogram) -> float:
    """-sum_leaf p(leaf) log q(leaf), evaluated leaf by leaf."""
    return float(-np.sum(target.weights * log_prob_many(d, target.paths)))


def entropy(target: TargetHistogram) -> float:
    w = target.weights[target.weights > 0]
    return float(-np.sum(w * np.log(w)))
