"""Command-line entry point.

Every subcommand validates its inputs first (exit 2 on a bad flag, key or file), then writes
``manifest.json`` into ``--out`` before doing any real work (exit 1 if that work fails).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import dump_fit_config, load_fit_config, resolve_scene
from .core import Camera
from .fileio import ConfigKeyError, FormatError, load_model, read_ply, save_model, write_pfm, write_ply, write_png
from .fmtoy import VARIANTS, FMConfig, train_toy, write_curves
from .octree import sample_anchors
from .raster import oracle_check
from .trainer import ConfigError, FitConfig, evaluate, fit, render_model
from .vecseq import TooFewPoints, fps, serialize, sobol3d

ORACLE_TOLERANCE = 1e-6


class UsageError(ValueError):
    pass


@dataclass
class RunManifest:
    command: str
    args: dict
    config: dict
    seed: int | None
    version: str = __version__
    inputs: dict = field(default_factory=dict)    # path -> sha256
    outputs: list = field(default_factory=list)   # relative to the output directory
    argv: list = field(default_factory=list)      # command line minus --out, for replay

    def write(self, out_dir: Path) -> None:
        (out_dir / "manifest.json").write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")


def _sha256(path) -> str:
    p = Path(path)
    h = hashlib.sha256()
    files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
    for q in files:
        if p.is_dir():
            h.update(str(q.relative_to(p)).encode())
        h.update(q.read_bytes())
    return h.hexdigest()


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def _load_ckpt(path: str):
    p = _existing(path, "checkpoint")
    try:
        return load_model(p)
    except FormatError as e:
        raise UsageError(f"unreadable checkpoint {path}: {e}") from None


def _budget(P: int, minimum: int = 1) -> int:
    if P < minimum:
        raise UsageError(f"--budget must be at least {minimum}")
    return P


# ---------------------------------------------------------------- export helpers

def export_anchors(model, P: int, seed: int, path) -> None:
    """Sample P anchors and write them with their log-probabilities as an ASCII PLY."""
    if P == 0:
        write_ply(path, np.zeros((0, 3)), {"log_prob": np.zeros(0)})
        return
    anchors = sample_anchors(model.density, P, np.random.default_rng(seed))
    write_ply(path, anchors.positions, {"log_prob": anchors.log_prob})


def read_token_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise UsageError(f"empty token file: {path}")
    body = rows[1:]
    try:
        return np.array([[float(x) for x in r] for r in body], dtype=float).reshape(len(body), -1)
    except ValueError as e:
        raise UsageError(f"non-numeric token value in {path}: {e}") from None


def load_cameras(path) -> list[Camera]:
    """A camera dict, a list of them, or a {"cameras": [...]} document."""
    try:
        doc = json.loads(Path(path).read_text())
        items = doc["cameras"] if isinstance(doc, dict) and "cameras" in doc else doc
        items = [items] if isinstance(items, dict) else items
        return [Camera.from_dict(c) for c in items]
    except (ValueError, KeyError, TypeError) as e:
        raise UsageError(f"bad camera file {path}: {e}") from None


# ---------------------------------------------------------------- subcommands
# Each returns (manifest, work); `work` does the heavy part and returns an exit code.

Prepared = tuple[RunManifest, Callable[[], int]]


def cmd_fit(a, out: Path) -> Prepared:
    cfg = load_fit_config(_existing(a.config, "config"))
    if a.seed is not None:
        cfg = FitConfig(**{**cfg.to_dict(), "seed": a.seed})
    targets = resolve_scene(a.scene, cfg)
    inputs = {a.config: _sha256(a.config)}
    if Path(a.scene).is_dir():
        inputs[a.scene] = _sha256(a.scene)
    man = RunManifest("fit", {"config": a.config, "scene": a.scene}, cfg.to_dict(), cfg.seed, inputs=inputs,
                      outputs=["config.ini", "log.csv", "model.ckpt"])

    def work():
        (out / "config.ini").write_text(dump_fit_config(cfg))
        progress = None if a.quiet else _progress
        model, rows = fit(cfg, targets, log_path=out / "log.csv", out_dir=out, progress=progress)
        model.meta["scene_spec"] = a.scene
        save_model(model, out / "model.ckpt")
        print(f"fit done: {len(rows)} iterations, final total {rows[-1]['total']:.6g}" if rows else "fit done")
        return 0

    return man, work


def _progress(row):
    if row["iteration"] % 50 == 0:
        print(f"iter {row['iteration']:5d} stage {row['stage']} P {row['P']:4d} total {row['total']:.5f}",
              file=sys.stderr)


def _model_targets(model, scene_flag):
    cfg = FitConfig.from_dict(model.meta["config"]) if "config" in model.meta else FitConfig()
    spec = scene_flag or model.meta.get("scene_spec") or model.meta.get("scene")
    if spec is None:
        raise UsageError("checkpoint does not record its scene; pass --scene")
    return resolve_scene(spec, cfg), spec


def cmd_eval(a, out: Path) -> Prepared:
    model = _load_ckpt(a.ckpt)
    P = _budget(a.budget)
    targets, spec = _model_targets(model, a.scene)
    man = RunManifest("eval", {"ckpt": a.ckpt, "budget": P, "scene": spec}, {}, a.seed,
                      inputs={a.ckpt: _sha256(a.ckpt)}, outputs=["metrics.csv"])

    def work():
        res = evaluate(model, targets, P, a.seed)
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["view", "psnr", "ssim"])
            for v in res["views"]:
                w.writerow([v["view"], repr(v["psnr"]), repr(v["ssim"])])
            w.writerow(["mean", repr(res["psnr"]), repr(res["ssim"])])
        print(f"P={P} seed={a.seed}: PSNR {res['psnr']:.3f} dB, SSIM {res['ssim']:.4f}")
        return 0

    return man, work


def cmd_render(a, out: Path) -> Prepared:
    model = _load_ckpt(a.ckpt)
    P = _budget(a.budget)
    cams = load_cameras(_existing(a.camera_json, "camera file"))
    names = [f"render_{i:03d}.png" for i in range(len(cams))]
    if a.pfm:
        names += [f"render_{i:03d}.pfm" for i in range(len(cams))]
    man = RunManifest("render", {"ckpt": a.ckpt, "camera_json": a.camera_json, "budget": P, "pfm": a.pfm}, {},
                      a.seed, inputs={a.ckpt: _sha256(a.ckpt), a.camera_json: _sha256(a.camera_json)},
                      outputs=names)

    def work():
        _, _, images = render_model(model, cams, P, a.seed)
        for i, im in enumerate(images):
            write_png(out / f"render_{i:03d}.png", im)
            if a.pfm:
                write_pfm(out / f"render_{i:03d}.pfm", im)
        print(f"rendered {len(images)} view(s) with P={P}")
        return 0

    return man, work


def cmd_sample_anchors(a, out: Path) -> Prepared:
    model = _load_ckpt(a.ckpt)
    P = _budget(a.budget, minimum=0)
    man = RunManifest("sample-anchors", {"ckpt": a.ckpt, "budget": P}, {}, a.seed,
                      inputs={a.ckpt: _sha256(a.ckpt)}, outputs=["anchors.ply"])

    def work():
        export_anchors(model, P, a.seed, out / "anchors.ply")
        print(f"wrote {P} anchors")
        return 0

    return man, work


def cmd_vecseq(a, out: Path) -> Prepared:
    try:
        points, _ = read_ply(_existing(a.points, "point file"))
    except FormatError as e:
        raise UsageError(f"bad point file {a.points}: {e}") from None
    tokens = read_token_csv(_existing(a.tokens, "token file"))
    if len(tokens) != len(points):
        raise UsageError(f"{len(tokens)} token rows for {len(points)} points")
    if a.m < 1:
        raise UsageError("--m must be at least 1")
    if a.m > len(points):
        raise UsageError(str(TooFewPoints(f"--m {a.m} exceeds the {len(points)} input points")))
    if a.pe_dim <= 0 or a.pe_dim % 6:
        raise UsageError("--pe-dim must be a positive multiple of 6")
    if a.directions:
        _existing(a.directions, "direction-number file")
    inputs = {a.points: _sha256(a.points), a.tokens: _sha256(a.tokens)}
    if a.directions:
        inputs[a.directions] = _sha256(a.directions)
    man = RunManifest("vecseq", {"points": a.points, "tokens": a.tokens, "m": a.m, "pe_dim": a.pe_dim,
                                 "directions": a.directions}, {}, a.seed, inputs=inputs,
                      outputs=["order.csv", "tokens.csv", "anchor_pe.csv"])

    def work():
        keep = fps(points, a.m) if a.m < len(points) else np.arange(len(points))
        anchors = sobol3d(a.m, a.directions)
        lo, hi = points.min(axis=0), points.max(axis=0)
        unit = (points[keep] - lo) / np.where(hi > lo, hi - lo, 1.0)   # anchors live in the unit cube
        res = serialize(tokens[keep], unit, anchors, a.pe_dim)
        src = keep[res.order]
        with open(out / "order.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["j", "src_index", "s_x", "s_y", "s_z", "cost"])
            for j in range(a.m):
                d2 = float(np.sum((unit[res.order[j]] - anchors.points[j]) ** 2))
                w.writerow([j, int(src[j]), *map(repr, map(float, anchors.points[j])), repr(d2)])
        np.savetxt(out / "tokens.csv", res.tokens, delimiter=",", fmt="%.17g",
                   header=",".join(f"c{k}" for k in range(res.tokens.shape[1])), comments="")
        np.savetxt(out / "anchor_pe.csv", res.anchor_pe, delimiter=",", fmt="%.17g",
                   header=",".join(f"pe{k}" for k in range(a.pe_dim)), comments="")
        print(f"serialized {a.m} tokens, transport cost {res.cost:.6g}")
        return 0

    return man, work


def cmd_fm_toy(a, out: Path) -> Prepared:
    try:
        cfg = FMConfig(M=a.m, steps=a.steps, seed=a.seed, variant=a.variant)
    except ValueError as e:
        raise UsageError(str(e)) from None
    man = RunManifest("fm-toy", {"variant": a.variant, "steps": a.steps, "m": a.m}, asdict(cfg), a.seed,
                      outputs=["curves.csv"])

    def work():
        rows = train_toy(cfg)
        write_curves(rows, out / "curves.csv")
        print(f"{a.variant}: val loss {rows[0]['val_loss']:.4f} -> {rows[-1]['val_loss']:.4f}")
        return 0

    return man, work


def cmd_oracle_check(a, out: Path) -> Prepared:
    if a.trials < 1 or not 1 <= a.max_prims:
        raise UsageError("--trials and --max-prims must be positive")
    man = RunManifest("oracle-check", {"trials": a.trials, "max_prims": a.max_prims}, {}, a.seed,
                      outputs=["oracle.json"])

    def work():
        dev = oracle_check(a.seed, a.trials, a.max_prims)
        ok = dev < ORACLE_TOLERANCE
        (out / "oracle.json").write_text(json.dumps({"max_abs_deviation": dev, "tolerance": ORACLE_TOLERANCE,
                                                     "pass": ok}, indent=1) + "\n")
        print(f"max abs deviation {dev:.3e} over {a.trials} scenes ({'ok' if ok else 'FAILED'})")
        return 0 if ok else 1

    return man, work


def cmd_replay(a) -> list[str]:
    doc = json.loads(_existing(a.manifest, "manifest").read_text())
    if "argv" not in doc:
        raise UsageError("manifest has no recorded command line")
    return doc["argv"]


COMMANDS = {
    "fit": cmd_fit, "eval": cmd_eval, "render": cmd_render, "sample-anchors": cmd_sample_anchors,
    "vecseq": cmd_vecseq, "fm-toy": cmd_fm_toy, "oracle-check": cmd_oracle_check,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="octsplat", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_text, seed_default=0):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", required=True, help="output directory (created if missing)")
        p.add_argument("--seed", type=int, default=seed_default)
        return p

    p = add("fit", "fit a density + decoder to a target scene", seed_default=None)
    p.add_argument("--config", required=True)
    p.add_argument("--scene", default="thin", help="bundled scene name or a target directory")
    p.add_argument("--quiet", action="store_true")

    for name in ("eval", "render", "sample-anchors"):
        p = add(name, {"eval": "PSNR/SSIM of a checkpoint", "render": "render a checkpoint from given cameras",
                       "sample-anchors": "export sampled anchors as PLY"}[name])
        p.add_argument("--ckpt", required=True)
        p.add_argument("--budget", type=int, required=True, help="number of anchors P")
        if name == "eval":
            p.add_argument("--scene", default=None)
        if name == "render":
            p.add_argument("--camera-json", required=True)
            p.add_argument("--pfm", action="store_true", help="also write float PFM images")

    p = add("vecseq", "serialize a token set onto Sobol anchors")
    p.add_argument("--points", required=True)
    p.add_argument("--tokens", required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--pe-dim", type=int, default=12)
    p.add_argument("--directions", default=None, help="Joe-Kuo style direction-number file")

    p = add("fm-toy", "flow-matching toy run")
    p.add_argument("--variant", choices=VARIANTS, default="reordered")
    p.add_argument("--steps", type=int, default=FMConfig.steps)
    p.add_argument("--m", type=int, default=FMConfig.M)

    p = add("oracle-check", "fused contribution vs leave-one-out on random scenes")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--max-prims", type=int, default=20)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        a = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    out = Path(a.out)
    try:
        if a.command == "replay":
            return main(cmd_replay(a) + ["--out", a.out])
        man, work = COMMANDS[a.command](a, out)
    except (UsageError, ConfigKeyError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        out.mkdir(parents=True, exist_ok=True)
        man.argv = _strip_out(argv)
        man.write(out)
        return work()
    except Exception as e:  # runtime failures are reported, not raised, so scripts get an exit code
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def _strip_out(argv: list[str]) -> list[str]:
    """The command line without --out, so the manifest does not depend on where it was written."""
    kept, skip = [], False
    for tok in argv:
        if skip:
            skip = False
            continue
        if tok == "--out":
            skip = True
            continue
        if tok.startswith("--out="):
            continue
        kept.append(tok)
    return kept


if __name__ == "__main__":
    sys.exit(main())
