"""Canonical ordering of point-indexed token sets: Sobol anchors, farthest point sampling,
exact optimal-transport assignment, and sinusoidal anchor embeddings."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

SOBOL_BITS = 32
PE_BASE = 10000.0


class TooFewPoints(ValueError):
    pass


class SizeMismatch(ValueError):
    pass


def load_direction_numbers(path=None) -> list[tuple[int, int, list[int]]]:
    """(s, a, m) rows for dimensions 2, 3, ... from a Joe-Kuo style table."""
    if path is None:
        text = resources.files("octsplat").joinpath("data/joe_kuo_d8.txt").read_text()
    else:
        text = Path(path).read_text()
    rows = []
    for line in text.splitlines()[1:]:
        parts = line.split()
        if not parts:
            continue
        s, a = int(parts[1]), int(parts[2])
        m = [int(x) for x in parts[3:]]
        if len(m) != s:
            raise ValueError(f"dimension {parts[0]}: expected {s} initial numbers, got {len(m)}")
        rows.append((s, a, m))
    return rows


def _directions(s: int, a: int, m: list[int]) -> np.ndarray:
    v = np.zeros(SOBOL_BITS + 1, dtype=np.uint64)
    for k in range(1, SOBOL_BITS + 1):
        if k <= s:
            v[k] = np.uint64(m[k - 1]) << np.uint64(SOBOL_BITS - k)
        else:
            x = v[k - s] ^ (v[k - s] >> np.uint64(s))
            for i in range(1, s):
                if (a >> (s - 1 - i)) & 1:
                    x ^= v[k - i]
            v[k] = x
    return v


def sobol(M: int, dim: int = 3, direction_file=None) -> np.ndarray:
    """Points 1..M of the unscrambled Sobol sequence (index 0, the origin, is skipped)."""
    if M < 1:
        raise ValueError("need M >= 1")
    if M >= 2**SOBOL_BITS:
        raise ValueError("M too large for 32-bit direction numbers")
    table = load_direction_numbers(direction_file)
    if dim - 1 > len(table):
        raise ValueError(f"direction table covers {len(table) + 1} dimensions")
    first = np.array([0] + [1 << (SOBOL_BITS - k) for k in range(1, SOBOL_BITS + 1)], dtype=np.uint64)
    dirs = [first] + [_directions(*row) for row in table[:dim - 1]]
    n = np.arange(1, M + 1, dtype=np.uint64)
    gray = n ^ (n >> np.uint64(1))
    out = np.zeros((M, dim))
    for j, v in enumerate(dirs):
        x = np.zeros(M, dtype=np.uint64)
        for k in range(SOBOL_BITS):
            bit = (gray >> np.uint64(k)) & np.uint64(1)
            x ^= bit * v[k + 1]
        out[:, j] = x.astype(np.float64) / 2.0**SOBOL_BITS
    return out


@dataclass
class SobolAnchors:
    points: np.ndarray   # (M, 3) in [0, 1)

    def __len__(self):
        return len(self.points)


def sobol3d(M: int, direction_file=None) -> SobolAnchors:
    return SobolAnchors(sobol(M, 3, direction_file))


def fps(points, M: int) -> np.ndarray:
    """Greedy max-min subset starting from index 0; ties go to the lowest index."""
    pts = np.asarray(points, dtype=float)
    N = len(pts)
    if M > N:
        raise TooFewPoints(f"asked for {M} of {N} points")
    if M <= 0:
        return np.zeros(0, dtype=np.int64)
    chosen = np.zeros(M, dtype=np.int64)
    dist = np.sum((pts - pts[0]) ** 2, axis=1)
    for i in range(1, M):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return chosen


def ot_assign(src, anchors) -> tuple[np.ndarray, float]:
    """Permutation pi with src[pi[j]] matched to anchors[j], minimizing total squared distance."""
    src = np.asarray(src, dtype=float)
    anc = np.asarray(getattr(anchors, "points", anchors), dtype=float)
    if src.shape != anc.shape:
        raise SizeMismatch(f"{src.shape} vs {anc.shape}")
    cost = np.sum((anc[:, None, :] - src[None, :, :]) ** 2, axis=2)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(anc), dtype=np.int64)
    perm[rows] = cols
    return perm, float(cost[rows, cols].sum())


def sinusoidal_pe(points, D: int, base: float = PE_BASE) -> np.ndarray:
    """Per coordinate, D/6 frequencies base^(-f/(D/6)), laid out as (sin, cos) pairs."""
    if D <= 0 or D % 6:
        raise ValueError("embedding size must be a positive multiple of 6")
    pts = np.asarray(points, dtype=float)
    F = D // 6
    freqs = base ** (-np.arange(F) / F)
    ang = pts[:, :, None] * freqs[None, None, :]                 # (M, 3, F)
    pairs = np.stack([np.sin(ang), np.cos(ang)], axis=-1)         # (M, 3, F, 2)
    return pairs.reshape(len(pts), D)


@dataclass
class SerializedTokens:
    tokens: np.ndarray
    order: np.ndarray
    anchor_pe: np.ndarray
    anchors: np.ndarray
    cost: float


def serialize(tokens, src_points, anchors: SobolAnchors, pe_dim: int = 12, base: float = PE_BASE) -> SerializedTokens:
    tokens = np.asarray(tokens)
    if len(tokens) != len(src_points):
        raise SizeMismatch("one token row per source point")
    order, cost = ot_assign(src_points, anchors)
    return SerializedTokens(tokens[order], order, sinusoidal_pe(anchors.points, pe_dim, base),
                            np.asarray(anchors.points).copy(), cost)
