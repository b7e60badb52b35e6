"""Position-conditioned attribute decoder with local expansion: each anchor spawns K
Gaussians through a Fourier-feature MLP, plus the cluster and volume/opacity regularizers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import LOG_SCALE_MAX, LOG_SCALE_MIN, Scene, sigmoid
from .raster import ParamGrads

OUT_PER_PRIM = 14  # offset 3, log_scale 3, quat 4, opacity 1, rgb 3
WEIGHT_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


class ShapeMismatch(ValueError):
    pass


@dataclass
class DecoderParams:
    K: int
    fourier_bands: int
    hidden: int
    offset_scale: float
    base_log_scale: float
    domain_min: np.ndarray
    domain_max: np.ndarray
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        self.domain_min = np.asarray(self.domain_min, dtype=float)
        self.domain_max = np.asarray(self.domain_max, dtype=float)

    @property
    def in_dim(self) -> int:
        return 3 + 6 * self.fourier_bands

    @classmethod
    def init(cls, rng, *, K=32, fourier_bands=4, hidden=64, offset_scale=0.1, base_log_scale=np.log(0.03),
             domain_min=(-1, -1, -1), domain_max=(1, 1, 1), out_init=0.01) -> "DecoderParams":
        p = cls(K, fourier_bands, hidden, float(offset_scale), float(base_log_scale),
                np.asarray(domain_min, float), np.asarray(domain_max, float))
        d, H, O = p.in_dim, hidden, K * OUT_PER_PRIM
        p.weights = {
            "W1": rng.normal(scale=1.0 / np.sqrt(d), size=(d, H)),
            "b1": np.zeros(H),
            "W2": rng.normal(scale=1.0 / np.sqrt(H), size=(H, H)),
            "b2": np.zeros(H),
            "W3": rng.normal(scale=out_init / np.sqrt(H), size=(H, O)),
            "b3": np.zeros(O),
        }
        return p

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.weights.items()}

    def copy(self) -> "DecoderParams":
        p = DecoderParams(self.K, self.fourier_bands, self.hidden, self.offset_scale, self.base_log_scale,
                          self.domain_min.copy(), self.domain_max.copy())
        p.weights = {k: v.copy() for k, v in self.weights.items()}
        return p

    def num_params(self) -> int:
        return sum(v.size for v in self.weights.values())


def fourier_features(x, params: DecoderParams) -> np.ndarray:
    xn = 2.0 * (np.asarray(x, float) - params.domain_min) / (params.domain_max - params.domain_min) - 1.0
    feats = [xn]
    for b in range(params.fourier_bands):
        feats += [np.sin(2.0**b * np.pi * xn), np.cos(2.0**b * np.pi * xn)]
    return np.concatenate(feats, axis=1)


def _silu(x):
    return x * sigmoid(x)


def _silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


@dataclass
class Decoded:
    scene: Scene
    offsets: np.ndarray   # (P, K, 3) world-space offsets from each anchor
    cache: dict


def decode(positions, params: DecoderParams, background=(0.0, 0.0, 0.0)) -> Decoded:
    """positions: (P, 3) anchor positions (an AnchorSet's `.positions`)."""
    x = np.asarray(getattr(positions, "positions", positions), dtype=float).reshape(-1, 3)
    P, K = len(x), params.K
    w = params.weights
    f = fourier_features(x, params)
    z1 = f @ w["W1"] + w["b1"]
    h1 = _silu(z1)
    z2 = h1 @ w["W2"] + w["b2"]
    h2 = _silu(z2)
    out = (h2 @ w["W3"] + w["b3"]).reshape(P, K, OUT_PER_PRIM)

    th = np.tanh(out[..., 0:3])
    offsets = params.offset_scale * th
    centers = x[:, None, :] + offsets
    log_scales = params.base_log_scale + out[..., 3:6]
    quats = out[..., 6:10] + np.array([1.0, 0.0, 0.0, 0.0])
    logits = out[..., 10]
    colors = sigmoid(out[..., 11:14])
    scene = Scene(centers.reshape(-1, 3), log_scales.reshape(-1, 3), quats.reshape(-1, 4),
                  logits.reshape(-1), colors.reshape(-1, 3), np.asarray(background, float),
                  np.repeat(np.arange(P), K))
    cache = {"f": f, "z1": z1, "h1": h1, "z2": z2, "h2": h2, "th": th, "colors": colors}
    return Decoded(scene, offsets, cache)


def decode_backward(positions, params: DecoderParams, scene_grads: ParamGrads, decoded: Decoded | None = None) -> dict:
    """Weight gradients given gradients on the decoded scene's attributes."""
    x = np.asarray(getattr(positions, "positions", positions), dtype=float).reshape(-1, 3)
    P, K = len(x), params.K
    if scene_grads.centers.shape != (P * K, 3):
        raise ShapeMismatch(f"expected gradients for {P * K} primitives, got {scene_grads.centers.shape[0]}")
    if decoded is None:
        decoded = decode(x, params)
    c = decoded.cache
    w = params.weights

    d_out = np.zeros((P, K, OUT_PER_PRIM))
    d_out[..., 0:3] = scene_grads.centers.reshape(P, K, 3) * params.offset_scale * (1.0 - c["th"] ** 2)
    d_out[..., 3:6] = scene_grads.log_scales.reshape(P, K, 3)
    d_out[..., 6:10] = scene_grads.rotations.reshape(P, K, 4)
    d_out[..., 10] = scene_grads.opacity_logits.reshape(P, K)
    col = c["colors"]
    d_out[..., 11:14] = scene_grads.colors.reshape(P, K, 3) * col * (1.0 - col)
    d_out = d_out.reshape(P, K * OUT_PER_PRIM)

    g = {}
    g["W3"] = c["h2"].T @ d_out
    g["b3"] = d_out.sum(axis=0)
    d_z2 = (d_out @ w["W3"].T) * _silu_grad(c["z2"])
    g["W2"] = c["h1"].T @ d_z2
    g["b2"] = d_z2.sum(axis=0)
    d_z1 = (d_z2 @ w["W2"].T) * _silu_grad(c["z1"])
    g["W1"] = c["f"].T @ d_z1
    g["b1"] = d_z1.sum(axis=0)
    return g


def offset_reg(positions, offsets, gamma: float = 0.5) -> tuple[float, np.ndarray]:
    """Cluster centering + separation penalty and its gradient on the (P, K, 3) offsets."""
    x = np.asarray(getattr(positions, "positions", positions), dtype=float).reshape(-1, 3)
    offsets = np.asarray(offsets, dtype=float)
    P, K = offsets.shape[:2]
    mean = offsets.mean(axis=1)
    mean_norm = np.linalg.norm(mean, axis=1)
    sigma = np.sqrt(np.mean(np.sum(offsets**2, axis=2), axis=1))

    excess = mean_norm - gamma * sigma
    center = float(np.mean(np.maximum(excess, 0.0)))
    dist = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=2)
    gap = sigma[:, None] - dist
    np.fill_diagonal(gap, -np.inf)
    sep = float(np.sum(np.maximum(gap, 0.0)) / P**2)

    active = (excess > 0).astype(float) / P
    d_sigma = -gamma * active + np.sum(gap > 0, axis=1) / P**2
    safe_mean = np.where(mean_norm[:, None] > 0, mean / np.maximum(mean_norm, 1e-300)[:, None], 0.0)
    safe_sigma = np.where(sigma > 0, sigma, np.inf)
    grad = (active[:, None, None] * safe_mean[:, None, :] / K
            + d_sigma[:, None, None] * offsets / (K * safe_sigma[:, None, None]))
    return center + sep, grad


def volume_opacity_reg(scene: Scene, lam_volume: float, lam_opacity: float) -> tuple[float, ParamGrads]:
    n = len(scene)
    g = ParamGrads.zeros(n)
    if n == 0:
        return 0.0, g
    ls = np.clip(scene.log_scales, LOG_SCALE_MIN, LOG_SCALE_MAX)
    vol = np.exp(ls.sum(axis=1))
    a = sigmoid(scene.opacity_logits)
    value = lam_volume * float(vol.mean()) + lam_opacity * float(np.mean(1.0 - a))
    inside = (scene.log_scales > LOG_SCALE_MIN) & (scene.log_scales < LOG_SCALE_MAX)
    g.log_scales = np.where(inside, lam_volume * vol[:, None] / n, 0.0)
    g.opacity_logits = -lam_opacity * a * (1.0 - a) / n
    return value, g
