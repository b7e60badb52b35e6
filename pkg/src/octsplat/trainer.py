"""Per-scene fitting: octree density + attribute decoder + rasterizer in a three-stage curriculum."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .control import anchor_rewards, density_gradient, surrogate
from .decoder import DecoderParams, decode, decode_backward, offset_reg, volume_opacity_reg
from .losses import psnr, render_loss, ssim
from .octree import LogitGrads, OctreeDensity, ce_loss, histogram_from_points, sample_anchors
from .optim import Adam, OctreeAdam
from .raster import ParamGrads, backward_fused, render
from .scenes import TargetSet

LOG_COLUMNS = ("iteration", "stage", "P", "ce", "l1", "ssim", "render", "surrogate", "volume_opacity",
               "offset", "reg", "total", "mean_reward", "psnr")


class NonFiniteLoss(FloatingPointError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class FitConfig:
    lam_struct: float = 1.0
    lam_render: float = 1.0
    lam_reg: float = 1.0
    lam_kl: float = 0.0
    lam_ssim: float = 0.2
    lam_lpips: float = 0.0
    lam_volume: float = 1e-3
    lam_opacity: float = 1e-3
    lam_offset: float = 0.1
    gamma: float = 0.5
    contribution_reward: bool = True     # the anchor-level reward pathway into the logits
    reward_normalize: bool = False       # divide rewards by the anchor count
    P_min: int = 64
    P_max: int = 512
    K: int = 4
    levels: int = 4
    stage1_iters: int = 150
    stage2_iters: int = 0
    stage2_P: int = 64
    stage3_iters: int = 200
    views_per_iter: int = 2
    lr_decoder: float = 1e-3
    lr_logits: float = 1e-2
    seed: int = 0
    image_size: int = 32
    views: int = 8
    fourier_bands: int = 4
    hidden: int = 64
    offset_scale: float = 0.0            # 0 means twice the leaf edge
    base_scale: float = 0.0              # 0 means a third of the leaf edge
    decoder_init: float = 0.01

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lam_kl != 0:
            raise ConfigError("lam_kl must stay 0: the latent KL term is not part of this toolkit")
        if self.lam_lpips != 0:
            raise ConfigError("lam_lpips must stay 0: no perceptual network is bundled")
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name.startswith("lam_") and v < 0:
                raise ConfigError(f"{f.name} must be nonnegative")
        if not 1 <= self.P_min <= self.P_max:
            raise ConfigError("need 1 <= P_min <= P_max")
        if self.K < 1 or self.levels < 1 or self.views_per_iter < 1 or self.stage2_P < 1:
            raise ConfigError("K, levels, views_per_iter and stage2_P must be positive")
        if min(self.stage1_iters, self.stage2_iters, self.stage3_iters) < 0:
            raise ConfigError("iteration counts must be nonnegative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key: {unknown[0]}")
        return cls(**d)


@dataclass
class FittedModel:
    density: OctreeDensity
    decoder: DecoderParams
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    meta: dict = field(default_factory=dict)


def weights_digest(params: DecoderParams) -> str:
    h = hashlib.sha256()
    for k in sorted(params.weights):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params.weights[k]).tobytes())
    return h.hexdigest()


def init_model(cfg: FitConfig, targets: TargetSet, rng) -> FittedModel:
    d = OctreeDensity(cfg.levels)
    edge = float(d.leaf_size()[0])
    dec = DecoderParams.init(rng, K=cfg.K, fourier_bands=cfg.fourier_bands, hidden=cfg.hidden,
                             offset_scale=cfg.offset_scale or 2 * edge,
                             base_log_scale=np.log(cfg.base_scale or edge / 3),
                             domain_min=d.domain_min, domain_max=d.domain_max, out_init=cfg.decoder_init)
    return FittedModel(d, dec, np.asarray(targets.background, float).copy())


@dataclass
class StepRecord:
    values: dict
    logit_grads: LogitGrads
    decoder_grads: dict | None


def _render_step(model: FittedModel, targets: TargetSet, views, P: int, cfg: FitConfig, rng, with_reward: bool):
    """Render-side objective for one sampled anchor set and its gradients."""
    anchors = sample_anchors(model.density, P, rng)
    dec = decode(anchors, model.decoder, model.background)
    scene = dec.scene
    n = len(scene)
    g_scene = ParamGrads.zeros(n)
    delta = np.zeros(n)
    l1 = ss = rl = 0.0
    nv = len(views)
    for v in views:
        cam, tgt = targets.cameras[v], targets.images[v]
        out = render(scene, cam)
        loss, g_img, parts = render_loss(out.image.pixels, tgt.pixels, cfg.lam_ssim)
        g, contrib = backward_fused(scene, cam, out, grad_image=g_img / nv, target=tgt.pixels)
        g_scene = g_scene + g
        # summed-L1 contributions expressed in the mean-L1 units of the loss
        delta += contrib.delta_l1 / (tgt.pixels.size * nv)
        l1 += parts["l1"] / nv
        ss += parts["ssim"] / nv
        rl += loss / nv

    vo, g_vo = volume_opacity_reg(scene, cfg.lam_volume, cfg.lam_opacity)
    off, g_off = offset_reg(anchors, dec.offsets, cfg.gamma)
    reg = vo + cfg.lam_offset * off
    g_reg = g_vo
    g_reg.centers = g_reg.centers + cfg.lam_offset * g_off.reshape(-1, 3)

    upstream = g_scene.scale(cfg.lam_render) + g_reg.scale(cfg.lam_reg)
    dec_grads = decode_backward(anchors, model.decoder, upstream, dec)

    rewards = anchor_rewards(delta, scene.anchor_of, P)
    clamped = rewards.clamped / P if cfg.reward_normalize else rewards.clamped
    sur = surrogate(anchors, clamped) if with_reward else 0.0
    lg = density_gradient(anchors, clamped, model.density).scaled(cfg.lam_render) if with_reward else LogitGrads()
    vals = {"l1": l1, "ssim": ss, "render": rl, "surrogate": sur, "volume_opacity": vo, "offset": off,
            "reg": reg, "mean_reward": float(np.mean(rewards.raw))}
    return vals, lg, dec_grads


def _check_finite(vals: dict, it: int, out_dir):
    bad = [k for k, v in vals.items() if isinstance(v, float) and not np.isfinite(v)]
    if bad:
        if out_dir is not None:
            Path(out_dir, "nonfinite_dump.json").write_text(json.dumps(
                {"iteration": it, "values": {k: repr(v) for k, v in vals.items()}}, indent=1))
        raise NonFiniteLoss(f"non-finite {', '.join(bad)} at iteration {it}")


def fit(cfg: FitConfig, targets: TargetSet, log_path=None, out_dir=None, progress=None) -> tuple[FittedModel, list[dict]]:
    """Three-stage curriculum. Returns the model and the per-iteration log rows."""
    cfg.validate()
    if len(targets) < 2:
        raise ConfigError("need at least two target views")
    rng = np.random.default_rng(cfg.seed)
    model = init_model(cfg, targets, rng)
    hist = histogram_from_points(targets.points, cfg.levels, model.density.domain_min, model.density.domain_max)
    opt_d = OctreeAdam(lr=cfg.lr_logits)
    opt_w = Adam(lr=cfg.lr_decoder)
    rows: list[dict] = []
    schedule = [(1, cfg.stage1_iters), (2, cfg.stage2_iters), (3, cfg.stage3_iters)]
    it = 0
    for stage, iters in schedule:
        for _ in range(iters):
            ce, g_ce = ce_loss(model.density, hist)
            vals = {"ce": ce, "l1": 0.0, "ssim": 0.0, "render": 0.0, "surrogate": 0.0, "volume_opacity": 0.0,
                    "offset": 0.0, "reg": 0.0, "mean_reward": 0.0}
            logit_grads = g_ce.scaled(cfg.lam_struct)
            P = 0
            if stage > 1:
                P = cfg.stage2_P if stage == 2 else int(rng.integers(cfg.P_min, cfg.P_max + 1))
                views = np.sort(rng.choice(len(targets), size=min(cfg.views_per_iter, len(targets)), replace=False))
                with_reward = stage == 3 and cfg.contribution_reward
                rv, lg, dec_grads = _render_step(model, targets, views, P, cfg, rng, with_reward)
                vals.update(rv)
                if with_reward:
                    logit_grads = logit_grads + lg
                elif lg:
                    raise AssertionError("reward pathway produced logit gradients while disabled")
                opt_w.step(model.decoder.weights, dec_grads)
            vals["total"] = (cfg.lam_struct * vals["ce"] + cfg.lam_render * (vals["render"] + vals["surrogate"])
                             + cfg.lam_reg * vals["reg"])
            _check_finite(vals, it, out_dir)
            opt_d.step(model.density, logit_grads)
            row = {"iteration": it, "stage": stage, "P": P, **vals, "psnr": float("nan")}
            rows.append(row)
            if progress is not None:
                progress(row)
            it += 1
    model.meta = {"config": cfg.to_dict(), "scene": targets.name}
    if log_path is not None:
        write_log(rows, log_path)
    return model, rows


def write_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r[c] if c in ("iteration", "stage", "P") else repr(float(r[c])) for c in LOG_COLUMNS])


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        return [{k: (int(v) if k in ("iteration", "stage", "P") else float(v)) for k, v in r.items()} for r in rd]


def recompute_total(row: dict, cfg: FitConfig) -> float:
    return (cfg.lam_struct * row["ce"] + cfg.lam_render * (row["render"] + row["surrogate"])
            + cfg.lam_reg * (row["volume_opacity"] + cfg.lam_offset * row["offset"]))


def render_model(model: FittedModel, cams, P: int, seed: int):
    rng = np.random.default_rng(seed)
    anchors = sample_anchors(model.density, P, rng)
    scene = decode(anchors, model.decoder, model.background).scene
    return anchors, scene, [render(scene, c).image for c in cams]


def evaluate(model: FittedModel, targets: TargetSet, P: int, seed: int) -> dict:
    _, _, images = render_model(model, targets.cameras, P, seed)
    per_view = [{"view": i, "psnr": psnr(im.pixels, t.pixels), "ssim": ssim(im.pixels, t.pixels)}
                for i, (im, t) in enumerate(zip(images, targets.images))]
    return {"views": per_view,
            "psnr": float(np.mean([v["psnr"] for v in per_view])),
            "ssim": float(np.mean([v["ssim"] for v in per_view]))}


def config_text(cfg: FitConfig) -> str:
    buf = io.StringIO()
    for k, v in cfg.to_dict().items():
        buf.write(f"{k} = {v}\n")
    return buf.getvalue()
