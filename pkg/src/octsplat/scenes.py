"""Procedural reference scenes rendered into multi-view target sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Camera, Image, Scene
from .raster import RenderOutput, render

SCENE_NAMES = ("thin", "sphere")


@dataclass
class TargetSet:
    cameras: list[Camera]
    images: list[Image]
    points: np.ndarray          # surface samples for histogram supervision
    background: np.ndarray
    name: str = ""

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ValueError("one image per camera")
        for c, im in zip(self.cameras, self.images):
            if (im.height, im.width) != (c.height, c.width):
                raise ValueError(f"image {im.height}x{im.width} does not match camera {c.height}x{c.width}")

    def __len__(self):
        return len(self.cameras)


def orbit_cameras(n: int, size: int, radius: float = 3.2, focal_mult: float = 1.5,
                  elevations=(0.5, 0.2)) -> list[Camera]:
    """n views on a ring around the origin, alternating between two elevations."""
    cams = []
    for i in range(n):
        az = 2 * np.pi * i / n
        el = elevations[i % len(elevations)]
        eye = radius * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        cams.append(Camera.look_at(eye, (0.0, 0.0, 0.0), (0.0, 1.0, 0.0),
                                   focal=focal_mult * size, width=size, height=size))
    return cams


def _frame(normal):
    """Unit quaternion (w, x, y, z) rotating +z onto `normal`."""
    n = normal / np.linalg.norm(normal)
    z = np.array([0.0, 0.0, 1.0])
    c = float(z @ n)
    if c < -1 + 1e-12:
        return np.array([0.0, 1.0, 0.0, 0.0])
    axis = np.cross(z, n)
    q = np.array([1.0 + c, *axis])
    return q / np.linalg.norm(q)


def _prims(centers, scales, quats, colors, logit=4.0):
    n = len(centers)
    return (np.asarray(centers, float), np.log(np.broadcast_to(scales, (n, 3))).copy(),
            np.asarray(quats, float), np.full(n, logit), np.asarray(colors, float))


def _concat(parts, background):
    cols = [np.concatenate(x) for x in zip(*parts)]
    return Scene(*cols, background=np.asarray(background, float))


def thin_reference(rng) -> tuple[Scene, np.ndarray]:
    """A checkered flat board with a thin pole and a thin hoop standing on it."""
    parts, pts = [], []
    # board: 1.4 x 1.4 square in the plane y = -0.45
    g = np.linspace(-0.7, 0.7, 22)
    gx, gz = np.meshgrid(g, g, indexing="ij")
    c = np.stack([gx.ravel(), np.full(gx.size, -0.45), gz.ravel()], 1)
    checker = ((np.floor((gx.ravel() + 0.7) / 0.35) + np.floor((gz.ravel() + 0.7) / 0.35)) % 2)[:, None]
    colors = checker * np.array([0.85, 0.8, 0.65]) + (1 - checker) * np.array([0.2, 0.3, 0.55])
    q = np.tile(_frame(np.array([0.0, 1.0, 0.0])), (len(c), 1))
    parts.append(_prims(c, (0.045, 0.045, 0.006), q, colors))
    pb = rng.uniform(-0.7, 0.7, size=(4000, 2))
    pts.append(np.stack([pb[:, 0], np.full(len(pb), -0.45), pb[:, 1]], 1))

    # pole: vertical, radius ~0.025, from the board up to y = 0.65
    ys = np.linspace(-0.42, 0.65, 28)
    c = np.stack([np.full_like(ys, 0.25), ys, np.full_like(ys, -0.1)], 1)
    parts.append(_prims(c, (0.025, 0.03, 0.025), np.tile([1.0, 0, 0, 0], (len(c), 1)),
                        np.tile([0.9, 0.15, 0.1], (len(c), 1))))
    t = rng.uniform(0, 1, 300)
    a = rng.uniform(0, 2 * np.pi, 300)
    pts.append(np.stack([0.25 + 0.025 * np.cos(a), -0.42 + 1.07 * t, -0.1 + 0.025 * np.sin(a)], 1))

    # hoop: ring of radius 0.35 in the x-y plane, centered above the board
    th = np.linspace(0, 2 * np.pi, 40, endpoint=False)
    c = np.stack([-0.2 + 0.35 * np.cos(th), 0.15 + 0.35 * np.sin(th), np.full_like(th, 0.2)], 1)
    tangent = np.stack([-np.sin(th), np.cos(th), np.zeros_like(th)], 1)
    quats = np.array([_frame(np.cross(tangent[i], [0.0, 0.0, 1.0])) for i in range(len(th))])
    parts.append(_prims(c, (0.03, 0.02, 0.02), quats, np.tile([0.1, 0.75, 0.3], (len(c), 1))))
    a = rng.uniform(0, 2 * np.pi, 300)
    pts.append(np.stack([-0.2 + 0.35 * np.cos(a), 0.15 + 0.35 * np.sin(a), np.full_like(a, 0.2)], 1)
               + rng.normal(scale=0.01, size=(300, 3)))
    return _concat(parts, (0.0, 0.0, 0.0)), np.concatenate(pts)


def sphere_reference(rng, n: int = 500, radius: float = 0.6) -> tuple[Scene, np.ndarray]:
    """A checker-textured sphere tiled with flat splats on a Fibonacci lattice."""
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    normal = np.stack([np.cos(theta) * np.sin(phi), np.cos(phi), np.sin(theta) * np.sin(phi)], 1)
    lon = np.mod(theta, 2 * np.pi)
    checker = ((np.floor(lon / (np.pi / 4)) + np.floor(phi / (np.pi / 4))) % 2)[:, None]
    colors = checker * np.array([0.9, 0.85, 0.2]) + (1 - checker) * np.array([0.15, 0.2, 0.7])
    quats = np.array([_frame(v) for v in normal])
    edge = radius * np.sqrt(4 * np.pi / n)
    scene = _concat([_prims(radius * normal, (0.6 * edge, 0.6 * edge, 0.01), quats, colors)], (0.0, 0.0, 0.0))
    v = rng.normal(size=(3000, 3))
    return scene, radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def synth_scene(name: str, seed: int = 0, size: int = 32, views: int = 8) -> TargetSet:
    if name not in SCENE_NAMES:
        raise ValueError(f"unknown scene {name!r}; choose from {', '.join(SCENE_NAMES)}")
    if not 8 <= views <= 16:
        raise ValueError("synthetic scenes use 8 to 16 views")
    rng = np.random.default_rng(seed)
    scene, points = (thin_reference if name == "thin" else sphere_reference)(rng)
    cams = orbit_cameras(views, size)
    images = [render(scene, c).image for c in cams]
    return TargetSet(cams, images, points, scene.background.copy(), name)


def reference_scene(name: str, seed: int = 0) -> Scene:
    rng = np.random.default_rng(seed)
    return (thin_reference if name == "thin" else sphere_reference)(rng)[0]


def coverage(out: RenderOutput, cam: Camera, points) -> np.ndarray:
    """Final transmittance at the pixels the surface points project to."""
    t = (np.asarray(points) - cam.position) @ cam.rotation.T
    t = t[t[:, 2] > cam.near]
    u = cam.focal * t[:, 0] / t[:, 2] + cam.width / 2
    v = cam.focal * t[:, 1] / t[:, 2] + cam.height / 2
    ok = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return out.final_transmittance[v[ok].astype(int), u[ok].astype(int)]


def random_scene(rng, n: int = 10, spread: float = 0.6, background=None) -> Scene:
    """Unstructured primitives around the origin, used by the gradient and contribution checks."""
    q = rng.normal(size=(n, 4))
    return Scene(
        centers=rng.uniform(-spread, spread, size=(n, 3)),
        log_scales=np.log(rng.uniform(0.05, 0.3, size=(n, 3))),
        rotations=q / np.linalg.norm(q, axis=1, keepdims=True),
        opacity_logits=rng.uniform(-1.0, 2.0, size=n),
        colors=rng.uniform(0, 1, size=(n, 3)),
        background=rng.uniform(0, 1, size=3) if background is None else background,
    )


def random_camera(rng, size: int = 32, focal: float | None = None) -> Camera:
    theta = rng.uniform(0, 2 * np.pi)
    phi = rng.uniform(-0.5, 0.5)
    eye = 3.0 * np.array([np.cos(phi) * np.sin(theta), np.sin(phi), -np.cos(phi) * np.cos(theta)])
    return Camera.look_at(eye, np.zeros(3), focal=focal or 1.3 * size, width=size, height=size)
