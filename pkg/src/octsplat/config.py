"""Sectioned plain-text fit configs and on-disk target sets."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import Camera, Image
from .fileio import ConfigKeyError, dataclass_schema, parse_sections, read_ply, read_png, write_ply, write_png, \
    write_sections
from .scenes import SCENE_NAMES, TargetSet, synth_scene
from .trainer import FitConfig

SECTIONS = {
    "loss": ("lam_struct", "lam_render", "lam_reg", "lam_kl", "lam_ssim", "lam_lpips", "lam_volume",
             "lam_opacity", "lam_offset", "gamma", "contribution_reward", "reward_normalize"),
    "budget": ("P_min", "P_max", "K", "levels"),
    "schedule": ("stage1_iters", "stage2_iters", "stage2_P", "stage3_iters", "views_per_iter",
                 "lr_decoder", "lr_logits"),
    "decoder": ("fourier_bands", "hidden", "offset_scale", "base_scale", "decoder_init"),
    "run": ("seed", "image_size", "views"),
}


def _schema():
    types = dataclass_schema(FitConfig)
    covered = [k for keys in SECTIONS.values() for k in keys]
    assert sorted(covered) == sorted(types), "config table out of sync with FitConfig"
    return {sec: {k: types[k] for k in keys} for sec, keys in SECTIONS.items()}


def parse_fit_config(text: str) -> FitConfig:
    flat = {}
    for sec, kv in parse_sections(text, _schema()).items():
        flat.update(kv)
    return FitConfig(**flat)


def load_fit_config(path) -> FitConfig:
    return parse_fit_config(Path(path).read_text())


def dump_fit_config(cfg: FitConfig) -> str:
    d = cfg.to_dict()
    return write_sections({sec: {k: d[k] for k in keys} for sec, keys in SECTIONS.items()})


def save_targets(targets: TargetSet, directory) -> None:
    """cameras.json + view_NNN.png + points.ply."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cameras.json").write_text(json.dumps(
        {"background": [float(x) for x in targets.background], "name": targets.name,
         "cameras": [c.to_dict() for c in targets.cameras]}, indent=1))
    for i, im in enumerate(targets.images):
        write_png(out / f"view_{i:03d}.png", im)
    write_ply(out / "points.ply", targets.points)


def load_targets(directory) -> TargetSet:
    src = Path(directory)
    meta = json.loads((src / "cameras.json").read_text())
    cams = [Camera.from_dict(c) for c in meta["cameras"]]
    images = [Image(read_png(src / f"view_{i:03d}.png")) for i in range(len(cams))]
    points, _ = read_ply(src / "points.ply")
    return TargetSet(cams, images, points, np.array(meta.get("background", [0, 0, 0]), float),
                     meta.get("name", src.name))


def resolve_scene(spec: str, cfg: FitConfig) -> TargetSet:
    """A bundled scene name or a directory written by `save_targets`."""
    if spec in SCENE_NAMES:
        return synth_scene(spec, seed=0, size=cfg.image_size, views=cfg.views)
    if Path(spec).is_dir():
        return load_targets(spec)
    raise ConfigKeyError(f"unknown scene: {spec} (expected {' or '.join(SCENE_NAMES)} or a target directory)")
