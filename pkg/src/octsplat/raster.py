"""Depth-sorted alpha compositing of projected Gaussians, its backward pass, and the
fused per-primitive L1 contribution (leave-one-out loss change) accumulation.

Hits are laid out as a padded (pixels x max_hits) table in front-to-back order,
so the per-pixel loops of a tile rasterizer become cumulative products and
suffix sums along axis 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ALPHA_MAX, ALPHA_MIN, Camera, Image, Projection, Scene, project_arrays, \
    quat_rotmat_backward, sigmoid, LOG_SCALE_MIN, LOG_SCALE_MAX

EARLY_STOP_T = 1e-4


class MismatchedBuffers(ValueError):
    pass


@dataclass(frozen=True)
class RenderSettings:
    """`precision="low"` composites in float32. `early_stop=None` disables the
    transmittance cutoff, which makes the leave-one-out identity exact."""

    precision: str = "high"
    early_stop: float | None = EARLY_STOP_T

    @property
    def dtype(self):
        return np.float64 if self.precision == "high" else np.float32


DEFAULT_SETTINGS = RenderSettings()
EXACT_SETTINGS = RenderSettings(early_stop=None)


@dataclass
class RenderOutput:
    image: Image
    final_transmittance: np.ndarray   # (H, W)
    sorted_order: np.ndarray          # visible primitive indices by increasing depth
    hit_prim: np.ndarray              # (H*W, max_hits) primitive index, -1 for padding
    hit_alpha: np.ndarray             # (H*W, max_hits) clamped alpha
    hit_T: np.ndarray                 # (H*W, max_hits) transmittance before each hit
    hit_dx: np.ndarray                # pixel - mean2d, x
    hit_dy: np.ndarray
    hit_raw: np.ndarray               # opacity * gaussian falloff, before the 0.999 clamp
    proj: Projection
    settings: RenderSettings

    @property
    def per_pixel_hits(self) -> list[list[tuple[int, float]]]:
        out = []
        for prims, alphas in zip(self.hit_prim, self.hit_alpha):
            m = prims >= 0
            out.append(list(zip(prims[m].tolist(), alphas[m].tolist())))
        return out


def _candidate_hits(proj: Projection, opac: np.ndarray, cam: Camera):
    """All (primitive, pixel) pairs inside the exact alpha >= 1/255 ellipse's bounding box."""
    live = proj.valid & (opac >= ALPHA_MIN)
    ids = np.flatnonzero(live)
    if len(ids) == 0:
        e = np.zeros(0, dtype=np.int64)
        return e, e, e
    r2 = 2.0 * np.log(np.maximum(opac[ids] * 255.0, 1.0))
    hx = np.sqrt(r2 * proj.cov2d[ids, 0, 0]) + 1.0
    hy = np.sqrt(r2 * proj.cov2d[ids, 1, 1]) + 1.0
    mx, my = proj.mean2d[ids, 0], proj.mean2d[ids, 1]
    x0 = np.clip(np.ceil(mx - hx - 0.5), 0, cam.width).astype(np.int64)
    x1 = np.clip(np.floor(mx + hx - 0.5), -1, cam.width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(my - hy - 0.5), 0, cam.height).astype(np.int64)
    y1 = np.clip(np.floor(my + hy - 0.5), -1, cam.height - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    cnt = nx * ny
    total = int(cnt.sum())
    prim = np.repeat(ids, cnt)
    start = np.repeat(np.cumsum(cnt) - cnt, cnt)
    local = np.arange(total) - start
    nxr = np.repeat(nx, cnt)
    px = np.repeat(x0, cnt) + local % np.maximum(nxr, 1)
    py = np.repeat(y0, cnt) + local // np.maximum(nxr, 1)
    return prim, px, py


def render(scene: Scene, cam: Camera, settings: RenderSettings = DEFAULT_SETTINGS) -> RenderOutput:
    dt = settings.dtype
    H, W = cam.height, cam.width
    npix = H * W
    proj = project_arrays(scene.centers, scene.log_scales, scene.rotations, cam)
    opac = sigmoid(scene.opacity_logits)

    visible = np.flatnonzero(proj.valid)
    order = visible[np.argsort(proj.t[visible, 2], kind="stable")]
    rank = np.full(len(scene), -1, dtype=np.int64)
    rank[order] = np.arange(len(order))

    prim, px, py = _candidate_hits(proj, opac, cam)
    dx = px + 0.5 - proj.mean2d[prim, 0]
    dy = py + 0.5 - proj.mean2d[prim, 1]
    a, b, c = proj.conic[prim].T
    power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
    raw = opac[prim] * np.exp(np.minimum(power, 0.0))
    alpha = np.minimum(raw, ALPHA_MAX)
    keep = alpha >= ALPHA_MIN
    prim, px, py, dx, dy, raw, alpha = (v[keep] for v in (prim, px, py, dx, dy, raw, alpha))

    pix = py * W + px
    srt = np.lexsort((rank[prim], pix))
    prim, pix, dx, dy, raw, alpha = (v[srt] for v in (prim, pix, dx, dy, raw, alpha))
    counts = np.bincount(pix, minlength=npix)
    maxh = int(counts.max()) if len(pix) else 0
    starts = np.cumsum(counts) - counts
    slot = np.arange(len(pix)) - starts[pix]

    def table(vals, fill, dtype):
        t = np.full((npix, maxh), fill, dtype=dtype)
        t[pix, slot] = vals
        return t

    hit_prim = table(prim, -1, np.int64)
    hit_alpha = table(alpha, 0.0, dt)
    hit_dx = table(dx, 0.0, np.float64)
    hit_dy = table(dy, 0.0, np.float64)
    hit_raw = table(raw, 0.0, np.float64)

    one = dt(1.0)
    if settings.early_stop is not None and maxh:
        # a hit is dropped once the transmittance in front of it is below the cutoff
        T_after = np.cumprod(one - hit_alpha, axis=1)
        stopped = np.zeros_like(T_after, dtype=bool)
        stopped[:, 1:] = T_after[:, :-1] < settings.early_stop
        hit_alpha[stopped] = 0.0
        hit_prim[stopped] = -1

    T_after = np.cumprod(one - hit_alpha, axis=1) if maxh else np.ones((npix, 0), dtype=dt)
    hit_T = np.empty_like(T_after)
    if maxh:
        hit_T[:, 0] = one
        hit_T[:, 1:] = T_after[:, :-1]
    T_final = T_after[:, -1] if maxh else np.ones(npix, dtype=dt)

    colors = scene.colors.astype(dt)
    img = _composite(hit_prim, hit_alpha, hit_T, T_final, colors, scene.background.astype(dt))
    return RenderOutput(
        image=Image(img.reshape(H, W, 3).astype(np.float64)),
        final_transmittance=T_final.reshape(H, W).astype(np.float64),
        sorted_order=order,
        hit_prim=hit_prim, hit_alpha=hit_alpha, hit_T=hit_T,
        hit_dx=hit_dx, hit_dy=hit_dy, hit_raw=hit_raw,
        proj=proj, settings=settings,
    )


def _gather_colors(hit_prim, colors):
    # padded slots get color 0; their alpha is 0 as well
    ext = np.concatenate([colors, np.zeros((1, 3), dtype=colors.dtype)])
    return ext[hit_prim]


def _composite(hit_prim, hit_alpha, hit_T, T_final, colors, background):
    w = hit_T * hit_alpha
    C = _gather_colors(hit_prim, colors)
    return np.einsum("pk,pkc->pc", w, C) + T_final[:, None] * background[None, :]


def recompose(out: RenderOutput, scene: Scene) -> np.ndarray:
    """Rebuild the image from the stored hit tables (same arithmetic as `render`)."""
    dt = out.settings.dtype
    T_final = out.final_transmittance.reshape(-1).astype(dt)
    img = _composite(out.hit_prim, out.hit_alpha, out.hit_T, T_final,
                     scene.colors.astype(dt), scene.background.astype(dt))
    return img.reshape(out.image.pixels.shape).astype(np.float64)


@dataclass
class ParamGrads:
    centers: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "ParamGrads":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n), np.zeros((n, 3)))

    def __add__(self, other: "ParamGrads") -> "ParamGrads":
        return ParamGrads(*(getattr(self, k) + getattr(other, k) for k in self.FIELDS))

    def scale(self, s: float) -> "ParamGrads":
        return ParamGrads(*(getattr(self, k) * s for k in self.FIELDS))

    FIELDS = ("centers", "log_scales", "rotations", "opacity_logits", "colors")


@dataclass
class ContributionBuffer:
    delta_l1: np.ndarray


def _check(out: RenderOutput, cam: Camera, arr: np.ndarray | None, name: str):
    if out.image.pixels.shape != (cam.height, cam.width, 3):
        raise MismatchedBuffers(f"render output {out.image.pixels.shape} does not match camera "
                                f"{cam.width}x{cam.height}")
    if arr is not None and arr.shape != (cam.height, cam.width, 3):
        raise MismatchedBuffers(f"{name} has shape {arr.shape}, expected {(cam.height, cam.width, 3)}")


def backward_fused(scene: Scene, cam: Camera, out: RenderOutput, grad_image=None, target=None):
    """One reverse traversal of the hit table.

    Returns (ParamGrads or None, ContributionBuffer or None) depending on which of
    `grad_image` / `target` is given.
    """
    g_img = None if grad_image is None else np.asarray(grad_image, dtype=float)
    tgt = None if target is None else np.asarray(getattr(target, "pixels", target), dtype=float)
    _check(out, cam, g_img, "grad_image")
    _check(out, cam, tgt, "target")

    n = len(scene)
    dt = out.settings.dtype
    npix = cam.width * cam.height
    hp, A, T = out.hit_prim, out.hit_alpha, out.hit_T
    T_final = out.final_transmittance.reshape(-1).astype(dt)
    C = _gather_colors(hp, scene.colors.astype(dt))
    Wc = (T * A)[:, :, None] * C
    # S[k] = everything composited behind hit k, including the background
    S = np.zeros_like(Wc)
    if Wc.shape[1] > 1:
        S[:, :-1] = np.cumsum(Wc[:, :0:-1], axis=1)[:, ::-1]
    S += (T_final[:, None] * scene.background.astype(dt)[None, :])[:, None, :]
    inv_one_minus = 1.0 / (1.0 - A)

    m = hp >= 0
    ids = hp[m]

    contrib = None
    if tgt is not None:
        R = out.image.pixels.reshape(npix, 3).astype(dt) - tgt.reshape(npix, 3).astype(dt)
        dC = Wc - (A * inv_one_minus)[:, :, None] * S
        delta = np.sum(np.abs(R)[:, None, :] - np.abs(R[:, None, :] - dC), axis=2)
        contrib = ContributionBuffer(np.bincount(ids, weights=delta[m].astype(np.float64), minlength=n))

    grads = None
    if g_img is not None:
        grads = _param_backward(scene, cam, out, g_img.reshape(npix, 3).astype(dt), C, S, inv_one_minus, m, ids)
    return grads, contrib


def _param_backward(scene, cam, out, g, C, S, inv_one_minus, m, ids):
    n = len(scene)
    A, T = out.hit_alpha, out.hit_T
    proj = out.proj

    dcol_hit = (T * A)[:, :, None] * g[:, None, :]
    dalpha = np.einsum("pc,pkc->pk", g, T[:, :, None] * C - inv_one_minus[:, :, None] * S)

    dalpha = dalpha[m].astype(np.float64)
    raw = out.hit_raw[m]
    dx, dy = out.hit_dx[m], out.hit_dy[m]
    unclamped = raw < ALPHA_MAX
    opac = sigmoid(scene.opacity_logits)
    o = opac[ids]
    falloff = raw / np.where(o > 0, o, 1.0)
    d_raw = np.where(unclamped, dalpha, 0.0)
    d_opac_hit = d_raw * falloff
    d_power = d_raw * raw

    def acc(w):
        return np.bincount(ids, weights=w, minlength=n)

    a, b, c = proj.conic[ids].T
    d_mx = acc(d_power * (a * dx + b * dy))
    d_my = acc(d_power * (b * dx + c * dy))
    d_ca = acc(d_power * (-0.5 * dx * dx))
    d_cb = acc(d_power * (-dx * dy))
    d_cc = acc(d_power * (-0.5 * dy * dy))
    d_opac = acc(d_opac_hit)
    d_col = np.stack([acc(dcol_hit[..., ch][m].astype(np.float64)) for ch in range(3)], axis=1)

    # conic = inverse(cov2d): dL/dcov = -M G M with G the symmetric conic gradient
    Gm = np.zeros((n, 2, 2))
    Gm[:, 0, 0] = d_ca
    Gm[:, 0, 1] = Gm[:, 1, 0] = 0.5 * d_cb
    Gm[:, 1, 1] = d_cc
    M = np.zeros((n, 2, 2))
    M[:, 0, 0], M[:, 0, 1], M[:, 1, 1] = proj.conic.T
    M[:, 1, 0] = M[:, 0, 1]
    G2 = -M @ Gm @ M

    Wr = cam.rotation
    Ajw = proj.J @ Wr
    G3 = np.swapaxes(Ajw, 1, 2) @ G2 @ Ajw
    dA = 2.0 * G2 @ Ajw @ proj.cov3d
    dJ = dA @ Wr.T

    t = proj.t
    f = cam.focal
    tz = np.where(proj.valid, t[:, 2], 1.0)
    dt_ = np.zeros((n, 3))
    dt_[:, 0] = d_mx * f / tz + dJ[:, 0, 2] * (-f / tz**2)
    dt_[:, 1] = d_my * f / tz + dJ[:, 1, 2] * (-f / tz**2)
    dt_[:, 2] = (-(d_mx * f * t[:, 0] + d_my * f * t[:, 1]) / tz**2
                 + dJ[:, 0, 0] * (-f / tz**2) + dJ[:, 1, 1] * (-f / tz**2)
                 + dJ[:, 0, 2] * (2 * f * t[:, 0] / tz**3) + dJ[:, 1, 2] * (2 * f * t[:, 1] / tz**3))
    dt_[~proj.valid] = 0.0
    d_center = dt_ @ Wr

    s = proj.scales
    Msc = proj.R * s[:, None, :]
    dM = 2.0 * G3 @ Msc
    d_s = np.sum(dM * proj.R, axis=1)
    inside = (scene.log_scales > LOG_SCALE_MIN) & (scene.log_scales < LOG_SCALE_MAX)
    d_log_scale = np.where(inside, d_s * s, 0.0)
    dR = dM * s[:, None, :]
    d_rot = quat_rotmat_backward(scene.rotations, dR) if n else np.zeros((0, 4))

    d_logit = d_opac * opac * (1.0 - opac)
    return ParamGrads(d_center, d_log_scale, d_rot, d_logit, d_col)


def backward(scene: Scene, cam: Camera, out: RenderOutput, grad_image) -> ParamGrads:
    """Gradient of sum(grad_image * image) with respect to every primitive attribute."""
    return backward_fused(scene, cam, out, grad_image=grad_image)[0]


def contribution_pass(scene: Scene, cam: Camera, out: RenderOutput, target) -> ContributionBuffer:
    """delta_l1[i] = sum over pixels/channels of |R| - |R - dC_i|, with
    dC_i = T_i a_i (c_i - back_i) the color change caused by removing primitive i."""
    return backward_fused(scene, cam, out, target=target)[1]


def l1_sum(image, target) -> float:
    a = np.asarray(getattr(image, "pixels", image))
    b = np.asarray(getattr(target, "pixels", target))
    return float(np.abs(a - b).sum())


def leave_one_out_oracle(scene: Scene, cam: Camera, target, i: int,
                         settings: RenderSettings = DEFAULT_SETTINGS) -> float:
    """Summed L1 of the full render minus summed L1 with primitive i removed (two renders)."""
    if not 0 <= i < len(scene):
        raise IndexError(f"primitive index {i} out of range for scene of size {len(scene)}")
    full = render(scene, cam, settings).image
    rest = render(scene.without(i), cam, settings).image
    return l1_sum(full, target) - l1_sum(rest, target)


def oracle_check(seed: int, trials: int, max_prims: int = 20, size: int = 32) -> float:
    """Max |fused contribution - leave-one-out| over `trials` random scenes, with early stop off."""
    from .scenes import random_camera, random_scene

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, max_prims + 1))
        scene, cam = random_scene(rng, n), random_camera(rng, size)
        target = rng.uniform(size=(size, size, 3))
        out = render(scene, cam, EXACT_SETTINGS)
        fused = contribution_pass(scene, cam, out, target).delta_l1
        loo = np.array([leave_one_out_oracle(scene, cam, target, i, EXACT_SETTINGS) for i in range(n)])
        worst = max(worst, float(np.abs(fused - loo).max()))
    return worst
