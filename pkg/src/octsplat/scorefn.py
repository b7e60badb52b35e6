"""Small frozen landscapes for checking the octree policy gradient.

With a frozen decoder and leaf-center dequantization, the render loss of a
single anchor depends only on its leaf, so the expected loss and its exact
logit gradient can be enumerated over all leaves and compared to
Monte-Carlo score-function estimates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .control import density_gradient, group_by_anchor
from .core import Camera, Image, Scene
from .decoder import DecoderParams, decode
from .octree import AnchorSet, LogitGrads, OctreeDensity, log_prob_many, sample_anchors
from .raster import EXACT_SETTINGS, contribution_pass, l1_sum, render


@dataclass
class Landscape:
    density: OctreeDensity
    decoder: DecoderParams
    cameras: list[Camera]
    targets: list[Image]
    background: np.ndarray

    def scene(self, positions) -> Scene:
        return decode(positions, self.decoder, self.background).scene

    def loss(self, scene: Scene) -> float:
        """Summed L1 over all views."""
        return sum(l1_sum(render(scene, c, EXACT_SETTINGS).image.pixels, t.pixels)
                   for c, t in zip(self.cameras, self.targets))

    def contributions(self, scene: Scene) -> np.ndarray:
        total = np.zeros(len(scene))
        for c, t in zip(self.cameras, self.targets):
            out = render(scene, c, EXACT_SETTINGS)
            total += contribution_pass(scene, c, out, t.pixels).delta_l1
        return total


def probe_landscape(levels: int = 2, size: int = 16) -> Landscape:
    """Two narrow cameras sitting on the z = 0 plane, one looking +z down the
    leaf column at (-x, -y) and one looking -z down the column at (+x, +y).

    The target is plain background, so the only leaves with nonzero loss are
    the ones in front of a camera in its column: two per camera, in a single
    parent cell each, with the nearer leaf several times costlier. The logits
    were chosen so that every touched coordinate's single-sample estimator has
    a small coefficient of variation (see `estimator_spread`).
    """
    if levels != 2:
        raise ValueError("the probe layout is defined for two levels")
    d = OctreeDensity(levels)
    d.tables[1].ensure(np.arange(8))     # instantiate every parent so dense layouts cover all anchors
    # octants 4 = (-,-,+) and 3 = (+,+,-) hold the visible leaves; the others add zero-loss mass
    d.set_logits(0, 0, [2.1, 1.5, 0.25, 2.0, 2.0, -0.6, -0.1, -0.6])
    inner = np.full(8, -2.5)
    inner[7], inner[3] = 2.5, -0.2       # near leaf child 7, far leaf child 3
    d.set_logits(1, 3, inner)
    inner = np.full(8, -2.5)
    inner[0], inner[4] = 2.5, -0.2       # near leaf child 0, far leaf child 4
    d.set_logits(1, 4, inner)

    dec = DecoderParams.init(np.random.default_rng(0), K=1, fourier_bands=1, hidden=4,
                             offset_scale=0.0, base_log_scale=np.log(0.03))
    dec.weights = dec.zeros_like()
    dec.weights["b3"][10] = 3.0          # opacity logit
    dec.weights["b3"][11:14] = [2.0, 1.0, 0.5]

    c = 1.0 - 0.5 * float(d.leaf_size()[0])
    focal = 0.5 * size / 0.3             # half-angle tangent 0.3
    cams = [Camera.look_at((-c, -c, 0.0), (-c, -c, 1.0), (0.0, -1.0, 0.0), focal=focal, width=size, height=size),
            Camera.look_at((c, c, 0.0), (c, c, -1.0), (0.0, -1.0, 0.0), focal=focal, width=size, height=size)]
    targets = [Image(np.zeros((size, size, 3))) for _ in cams]
    return Landscape(d, dec, cams, targets, np.zeros(3))


def leaf_losses(ls: Landscape) -> np.ndarray:
    """Loss of the single-anchor scene at every leaf center."""
    d = ls.density
    leaves = np.arange(8**d.levels)
    lo, hi = d.cell_bounds(d.levels, leaves)
    centers = 0.5 * (lo + hi)
    return np.array([ls.loss(ls.scene(c[None])) for c in centers])


def exact_gradient(d: OctreeDensity, losses) -> list[np.ndarray]:
    """grad_logits sum_leaf q(leaf) * losses[leaf] by enumeration, laid out like `d.tables`."""
    leaves = np.arange(8**d.levels)
    q = np.exp(log_prob_many(d, leaves))
    w = q * np.asarray(losses, dtype=float)
    # d q_leaf / d z_{cell,k} = q_leaf (1[child on path = k] - softmax_k) for each cell on the path
    g = LogitGrads()
    for l in range(1, d.levels + 1):
        cells = leaves >> (3 * (d.levels - l))
        parents = np.unique(cells >> 3)
        onehot = np.zeros((len(parents), 8))
        inv = np.searchsorted(parents, cells >> 3)
        np.add.at(onehot, (inv, cells & 7), w)
        total = np.bincount(inv, weights=w, minlength=len(parents))
        g[l - 1] = (parents, onehot - total[:, None] * softmax(d.logits_for(l - 1, parents), axis=1))
    return g.dense(d)


def concat_anchors(sets: list[AnchorSet]) -> AnchorSet:
    return AnchorSet(np.concatenate([a.positions for a in sets]),
                     np.concatenate([a.leaf_indices for a in sets]),
                     np.concatenate([a.log_prob for a in sets]), sets[0].levels)


def mc_gradient(ls: Landscape, losses, n: int, rng) -> list[np.ndarray]:
    """Average of n independent single-anchor estimates loss(x) * grad log q(x)."""
    d = ls.density
    draws = concat_anchors([sample_anchors(d, 1, rng, deterministic=True) for _ in range(n)])
    rewards = np.asarray(losses)[draws.leaf_indices]
    g = density_gradient(draws, rewards, d).dense(d)
    return [x / n for x in g]


def estimator_draw(ls: Landscape, P: int, rng, mode: str = "difference", iid: bool = True) -> np.ndarray:
    """One P-anchor policy-gradient estimate, flattened over all logit tables.

    mode "difference": each anchor's reward is its own leave-one-out L1 change.
    mode "reinforce": every anchor receives the total loss.
    With `iid` the anchors are P independent draws from q (the setting in which
    both estimators target the same gradient); otherwise one systematic batch.
    """
    d = ls.density
    if iid:
        anchors = concat_anchors([sample_anchors(d, 1, rng, deterministic=True) for _ in range(P)])
    else:
        anchors = sample_anchors(d, P, rng, deterministic=True)
    scene = ls.scene(anchors.positions)
    if mode == "difference":
        rewards = group_by_anchor(ls.contributions(scene), scene.anchor_of, P)
    elif mode == "reinforce":
        rewards = np.full(P, ls.loss(scene))
    else:
        raise ValueError(f"unknown estimator mode {mode!r}")
    return np.concatenate([x.ravel() for x in density_gradient(anchors, rewards, d).dense(d)])


def estimator_spread(d: OctreeDensity, losses, n: int) -> list[np.ndarray]:
    """Exact standard deviation of the n-sample mean of loss(x) * grad log q(x), per logit."""
    leaves = np.arange(8**d.levels)
    q = np.exp(log_prob_many(d, leaves))
    first = exact_gradient(d, losses)
    second = [np.zeros_like(x) for x in first]
    for leaf in leaves:
        if q[leaf] == 0 or losses[leaf] == 0:
            continue
        one = LogitGrads()
        for l in range(1, d.levels + 1):
            cell = leaf >> (3 * (d.levels - l))
            probs = softmax(d.logits_for(l - 1, [cell >> 3])[0])
            one[l - 1] = (np.array([cell >> 3]), (np.eye(8)[cell & 7] - probs)[None] * losses[leaf])
        for s_, x in zip(second, one.dense(d)):
            s_ += q[leaf] * x * x
    return [np.sqrt(np.maximum(s_ - f * f, 0.0) / n) for s_, f in zip(second, first)]
