"""Independent oracles shared by the rasterizer, decoder and acceptance tests."""

import numpy as np

from octsplat.core import Scene
from octsplat.octree import OctreeDensity, TargetHistogram
from octsplat.raster import EXACT_SETTINGS, render

ATTRS = ("centers", "log_scales", "rotations", "opacity_logits", "colors")


def naive_composite(scene: Scene, cam):
    """Per-pixel loop over depth-sorted primitives with explicit 2x2 inverses, no early stop."""
    H, W = cam.height, cam.width
    f = cam.focal
    items = []
    for i in range(len(scene)):
        t = cam.rotation @ (scene.centers[i] - cam.position)
        if t[2] <= cam.near:
            continue
        q = scene.rotations[i] / np.linalg.norm(scene.rotations[i])
        w, x, y, z = q
        R = np.array([
            [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z]])
        Sig = R @ np.diag(np.exp(2 * scene.log_scales[i])) @ R.T
        J = np.array([[f / t[2], 0, -f * t[0] / t[2] ** 2], [0, f / t[2], -f * t[1] / t[2] ** 2]])
        cov = J @ cam.rotation @ Sig @ cam.rotation.T @ J.T + 0.3 * np.eye(2)
        mean = np.array([f * t[0] / t[2] + W / 2, f * t[1] / t[2] + H / 2])
        o = 1 / (1 + np.exp(-scene.opacity_logits[i]))
        items.append((t[2], i, mean, np.linalg.inv(cov), o))
    items.sort(key=lambda it: (it[0], it[1]))
    img = np.zeros((H, W, 3))
    Tf = np.ones((H, W))
    for py in range(H):
        for px in range(W):
            T = 1.0
            acc = np.zeros(3)
            p = np.array([px + 0.5, py + 0.5])
            for _, i, mean, inv, o in items:
                d = p - mean
                a = min(0.999, o * np.exp(-0.5 * d @ inv @ d))
                if a < 1 / 255:
                    continue
                acc += T * a * scene.colors[i]
                T *= 1 - a
            img[py, px] = acc + T * scene.background
            Tf[py, px] = T
    return img, Tf


def hit_signature(out):
    m = out.hit_prim >= 0
    pix = np.nonzero(m)[0]
    return pix, out.hit_prim[m]


def perturbed(scene: Scene, attr: str, idx, h: float) -> Scene:
    s = scene.copy()
    getattr(s, attr)[idx] += h
    return s


def fd_param_grads(scene, cam, grad_image, h=1e-5, settings=EXACT_SETTINGS):
    """Central differences of sum(grad_image * render) for every attribute entry.

    Returns (grads, smooth) where `smooth` marks entries whose +/-h renders share
    the same hit set, i.e. where the image is differentiable.
    """
    grads, smooth = {}, {}
    for attr in ATTRS:
        arr = getattr(scene, attr)
        g = np.zeros_like(arr)
        ok = np.ones(arr.shape, dtype=bool)
        for idx in np.ndindex(arr.shape):
            op = render(perturbed(scene, attr, idx, h), cam, settings)
            om = render(perturbed(scene, attr, idx, -h), cam, settings)
            g[idx] = np.sum(grad_image * (op.image.pixels - om.image.pixels)) / (2 * h)
            sp, sm = hit_signature(op), hit_signature(om)
            ok[idx] = len(sp[0]) == len(sm[0]) and np.array_equal(sp[0], sm[0]) and np.array_equal(sp[1], sm[1])
        grads[attr], smooth[attr] = g, ok
    return grads, smooth


def relative_error(analytic, numeric, mask=None):
    """Norm-wise relative error ||a - n||_inf / ||n||_inf over the masked entries."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    if mask is not None:
        a, n = a[mask], n[mask]
    scale = np.max(np.abs(n)) if n.size else 0.0
    if scale == 0.0:
        return float(np.max(np.abs(a))) if a.size else 0.0
    return float(np.max(np.abs(a - n)) / scale)


def random_density(rng, levels, scale=1.5, fill=1.0):
    d = OctreeDensity(levels)
    for l in range(levels):
        for p in range(8**l):
            if rng.uniform() < fill:
                d.set_logits(l, p, rng.normal(scale=scale, size=8))
    return d


def random_histogram(rng, levels, n_leaves=20):
    paths = np.unique(rng.integers(0, 8**levels, size=n_leaves))
    w = rng.uniform(0.1, 1, size=len(paths))
    return TargetHistogram(paths, w / w.sum(), levels)
