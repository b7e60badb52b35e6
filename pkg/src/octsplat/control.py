"""Anchor-level rewards from per-primitive L1 contributions, and the score-function
gradient they induce on the octree logits."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .octree import AnchorSet, LogitGrads, OctreeDensity

CLAMP_PERCENTILE = 10.0


class UnmappedPrimitive(ValueError):
    pass


class StaleAnchors(ValueError):
    pass


@dataclass
class AnchorRewards:
    raw: np.ndarray
    clamped: np.ndarray


def group_by_anchor(delta_l1, anchor_of, num_anchors: int | None = None) -> np.ndarray:
    delta_l1 = np.asarray(delta_l1, dtype=float)
    if anchor_of is None or len(anchor_of) != len(delta_l1):
        raise UnmappedPrimitive("every primitive needs a source anchor")
    anchor_of = np.asarray(anchor_of, dtype=np.int64)
    if len(anchor_of) and anchor_of.min() < 0:
        raise UnmappedPrimitive("negative anchor index")
    n = num_anchors if num_anchors is not None else (int(anchor_of.max()) + 1 if len(anchor_of) else 0)
    return np.bincount(anchor_of, weights=delta_l1, minlength=n)


def clamp_rewards(raw, percentile: float = CLAMP_PERCENTILE) -> np.ndarray:
    """Raise values below the percentile (linear interpolation between order
    statistics) to it, then zero out positive entries."""
    raw = np.asarray(raw, dtype=float)
    if raw.size == 0:
        raise ValueError("need at least one anchor")
    thr = np.percentile(raw, percentile, method="linear")
    return np.minimum(np.maximum(raw, thr), 0.0)


def anchor_rewards(delta_l1, anchor_of, num_anchors: int) -> AnchorRewards:
    raw = group_by_anchor(delta_l1, anchor_of, num_anchors)
    return AnchorRewards(raw, clamp_rewards(raw))


def density_gradient(anchors: AnchorSet, rewards, d: OctreeDensity) -> LogitGrads:
    """sum_j rewards[j] * grad_logits log q(x_j).

    Descending this gradient raises q where rewards are negative, i.e. where an
    anchor's primitives lowered the loss.
    """
    rewards = np.asarray(rewards, dtype=float)
    leaves = np.asarray(anchors.leaf_indices, dtype=np.int64)
    if anchors.levels != d.levels or np.any(leaves >= 8**d.levels):
        raise StaleAnchors("anchors were sampled from a different octree depth")
    grads = LogitGrads()
    live = rewards != 0
    leaves, rewards = leaves[live], rewards[live]
    if len(leaves) == 0:
        return grads
    for l in range(1, d.levels + 1):
        cells = leaves >> (3 * (d.levels - l))
        parents, inv = np.unique(cells >> 3, return_inverse=True)
        # per parent: sum_j r_j (e_k - softmax) = onehot mass - (sum_j r_j) softmax
        onehot = np.zeros((len(parents), 8))
        np.add.at(onehot, (inv, cells & 7), rewards)
        total = np.bincount(inv, weights=rewards, minlength=len(parents))
        probs = softmax(d.logits_for(l - 1, parents), axis=1)
        grads[l - 1] = (parents, onehot - total[:, None] * probs)
    return grads


def surrogate(anchors: AnchorSet, rewards) -> float:
    """sum_j r_j log q(x_j); its logit gradient (rewards held fixed) is `density_gradient`."""
    return float(np.dot(np.asarray(rewards, dtype=float), anchors.log_prob))


def dump_rewards_csv(path, anchors: AnchorSet, rewards: AnchorRewards, iteration: int = 0, append=False):
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(["iteration", "anchor", "raw", "clamped", "log_prob"])
        for j in range(len(anchors)):
            w.writerow([iteration, j, repr(float(rewards.raw[j])), repr(float(rewards.clamped[j])),
                        repr(float(anchors.log_prob[j]))])
