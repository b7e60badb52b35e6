"""Shared domain types and EWA projection of 3D Gaussians onto a pinhole camera."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

COV2D_DILATION = 0.3
ALPHA_MAX = 0.999
ALPHA_MIN = 1.0 / 255.0
LOG_SCALE_MIN = float(np.log(1e-6))
LOG_SCALE_MAX = float(np.log(1e3))


class CulledBehindCamera(Exception):
    """Raised by `project_gaussian` when a center lies at or in front of the near plane."""


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions in (w, x, y, z) order. Normalizes first."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_rotmat_backward(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull (..., 3, 3) gradients on R back to the unnormalized quaternion."""
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = np.moveaxis(qn, -1, 0)
    g = dR
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    # d(q/|q|)/dq = (I - qn qn^T) / |q|
    return (dqn - qn * np.sum(dqn * qn, axis=-1, keepdims=True)) / norm


@dataclass
class GaussianPrimitive:
    center: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.log_scale = np.clip(np.asarray(self.log_scale, dtype=float).reshape(3),
                                 LOG_SCALE_MIN, LOG_SCALE_MAX)
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        self.rotation = q / np.linalg.norm(q)
        self.opacity_logit = float(self.opacity_logit)
        self.color = np.asarray(self.color, dtype=float).reshape(3)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


@dataclass
class Camera:
    """Pinhole camera. `rotation` maps world to camera coordinates; +z looks forward."""

    position: np.ndarray
    rotation: np.ndarray
    focal: float
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-9):
            raise ValueError("camera rotation must be orthonormal")
        if self.focal <= 0 or self.near <= 0:
            raise ValueError("focal and near must be positive")
        self.width = int(self.width)
        self.height = int(self.height)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), *, focal, width, height, near=0.01):
        eye = np.asarray(eye, dtype=float)
        fwd = np.asarray(target, dtype=float) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=float))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        # rows: camera x (right), camera y (image down), camera z (forward)
        R = np.stack([right, down, fwd])
        return cls(eye, R, focal, width, height, near)

    def to_dict(self) -> dict:
        return {"position": self.position.tolist(), "rotation": self.rotation.tolist(),
                "focal": self.focal, "width": self.width, "height": self.height, "near": self.near}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["position"], d["rotation"], d["focal"], d["width"], d["height"], d.get("near", 0.01))


@dataclass
class Scene:
    """Struct-of-arrays Gaussian set.

    Rotations are stored as given; renderers normalize them so gradients
    with respect to the raw quaternion are well defined.
    """

    centers: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    anchor_of: np.ndarray | None = None

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float).reshape(-1, 3)
        n = len(self.centers)
        self.log_scales = np.asarray(self.log_scales, dtype=float).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=float).reshape(n)
        self.colors = np.asarray(self.colors, dtype=float).reshape(n, 3)
        self.background = np.asarray(self.background, dtype=float).reshape(3)
        if self.anchor_of is not None:
            self.anchor_of = np.asarray(self.anchor_of, dtype=np.int64).reshape(n)

    def __len__(self):
        return len(self.centers)

    @classmethod
    def empty(cls, background=(0.0, 0.0, 0.0)) -> "Scene":
        z = np.zeros((0, 3))
        return cls(z, z, np.zeros((0, 4)), np.zeros(0), z, np.asarray(background, dtype=float))

    @classmethod
    def from_primitives(cls, prims, background=(0.0, 0.0, 0.0), anchor_of=None) -> "Scene":
        if not prims:
            return cls.empty(background)
        return cls(
            np.stack([p.center for p in prims]),
            np.stack([p.log_scale for p in prims]),
            np.stack([p.rotation for p in prims]),
            np.array([p.opacity_logit for p in prims]),
            np.stack([p.color for p in prims]),
            np.asarray(background, dtype=float),
            anchor_of,
        )

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(self.centers[i], self.log_scales[i], self.rotations[i],
                                 self.opacity_logits[i], self.colors[i])

    @property
    def primitives(self) -> list[GaussianPrimitive]:
        return [self.primitive(i) for i in range(len(self))]

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def subset(self, keep) -> "Scene":
        keep = np.asarray(keep)
        return Scene(self.centers[keep], self.log_scales[keep], self.rotations[keep],
                     self.opacity_logits[keep], self.colors[keep], self.background.copy(),
                     None if self.anchor_of is None else self.anchor_of[keep])

    def without(self, i: int) -> "Scene":
        return self.subset(np.arange(len(self)) != i)

    def copy(self) -> "Scene":
        return self.subset(np.arange(len(self)))


@dataclass
class Image:
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected HxWx3 pixels, got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("image contains non-finite values")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float


def project_gaussian(g: GaussianPrimitive, cam: Camera) -> Splat2D:
    t = cam.rotation @ (g.center - cam.position)
    if t[2] <= cam.near:
        raise CulledBehindCamera(f"depth {t[2]:.4g} <= near {cam.near}")
    proj = project_arrays(g.center[None], g.log_scale[None], g.rotation[None], cam)
    return Splat2D(proj.mean2d[0], proj.cov2d[0], float(t[2]), g.color.copy(), g.opacity)


def alpha_at(splat: Splat2D, pixel) -> float:
    d = np.asarray(pixel, dtype=float) - splat.mean2d
    power = -0.5 * d @ np.linalg.solve(splat.cov2d, d)
    a = min(ALPHA_MAX, splat.opacity * np.exp(power))
    return 0.0 if a < ALPHA_MIN else float(a)


@dataclass
class Projection:
    """Batched projection results plus the intermediates needed by the backward pass."""

    t: np.ndarray          # (N, 3) camera-frame centers
    mean2d: np.ndarray     # (N, 2) pixel coordinates
    cov3d: np.ndarray      # (N, 3, 3)
    cov2d: np.ndarray      # (N, 2, 2), dilated
    conic: np.ndarray      # (N, 3) inverse cov2d entries (a, b, c)
    J: np.ndarray          # (N, 2, 3)
    R: np.ndarray          # (N, 3, 3) rotation from quaternion
    scales: np.ndarray     # (N, 3)
    valid: np.ndarray      # (N,) in front of the near plane


def project_arrays(centers, log_scales, rotations, cam: Camera) -> Projection:
    centers = np.asarray(centers, dtype=float)
    n = len(centers)
    W = cam.rotation
    t = (centers - cam.position) @ W.T
    valid = t[:, 2] > cam.near
    tz = np.where(valid, t[:, 2], 1.0)
    f = cam.focal
    mean2d = np.stack([f * t[:, 0] / tz + 0.5 * cam.width, f * t[:, 1] / tz + 0.5 * cam.height], axis=1)

    scales = np.exp(np.clip(log_scales, LOG_SCALE_MIN, LOG_SCALE_MAX))
    R = quat_to_rotmat(rotations) if n else np.zeros((0, 3, 3))
    M = R * scales[:, None, :]
    cov3d = M @ np.swapaxes(M, 1, 2)

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = f / tz
    J[:, 0, 2] = -f * t[:, 0] / tz**2
    J[:, 1, 1] = f / tz
    J[:, 1, 2] = -f * t[:, 1] / tz**2
    A = J @ W
    cov2d = A @ cov3d @ np.swapaxes(A, 1, 2)
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    return Projection(t, mean2d, cov3d, cov2d, conic, J, R, scales, valid)


# --- scene text format -------------------------------------------------------

SCENE_HEADER = "# center(3) log_scale(3) quat_wxyz(4) opacity_logit rgb(3)"


def save_scene(scene: Scene, path) -> None:
    """One primitive per line; a `background` record holds the background color."""
    lines = [SCENE_HEADER, "background " + " ".join(repr(float(v)) for v in scene.background)]
    rows = np.concatenate([scene.centers, scene.log_scales, scene.rotations,
                           scene.opacity_logits[:, None], scene.colors], axis=1)
    for row in rows:
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_scene(path) -> Scene:
    background = np.zeros(3)
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "background":
            background = np.array([float(v) for v in parts[1:4]])
            continue
        if len(parts) != 14:
            raise ValueError(f"{path}:{lineno}: expected 14 values, got {len(parts)}")
        rows.append([float(v) for v in parts])
    if not rows:
        return Scene.empty(background)
    a = np.array(rows)
    return Scene(a[:, 0:3], a[:, 3:6], a[:, 6:10], a[:, 10], a[:, 11:14], background)
