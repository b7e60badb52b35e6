"""Readers and writers: PNG, PFM, ASCII PLY, sectioned config files, and the binary model container."""

from __future__ import annotations

import configparser
import dataclasses
import io
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .decoder import WEIGHT_NAMES, DecoderParams
from .octree import LevelTable, OctreeDensity


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- images

def write_png(path, pixels) -> None:
    px = np.asarray(getattr(pixels, "pixels", pixels), dtype=float)
    arr = np.round(np.clip(px, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0


def write_pfm(path, pixels) -> None:
    """Three-channel little-endian PFM (rows stored bottom to top)."""
    px = np.asarray(getattr(pixels, "pixels", pixels), dtype="<f4")
    h, w = px.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(px[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind != b"PF":
            raise FormatError("only three-channel PFM is supported")
        w, h = map(int, fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(w * h * 3 * 4), dtype=dtype)
    if data.size != w * h * 3:
        raise FormatError("truncated PFM payload")
    return data.reshape(h, w, 3)[::-1].astype(np.float64)


# ---------------------------------------------------------------- point clouds

def write_ply(path, positions, properties: dict | None = None) -> None:
    """ASCII PLY 1.0 with float x, y, z and optional extra per-vertex double properties."""
    pos = np.asarray(positions, dtype=float).reshape(-1, 3)
    props = {k: np.asarray(v, dtype=float).reshape(-1) for k, v in (properties or {}).items()}
    for k, v in props.items():
        if len(v) != len(pos):
            raise ValueError(f"property {k} has {len(v)} values for {len(pos)} vertices")
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pos)}",
             "property double x", "property double y", "property double z"]
    lines += [f"property double {k}" for k in props]
    lines.append("end_header")
    cols = [pos[:, 0], pos[:, 1], pos[:, 2], *props.values()]
    body = [" ".join(repr(float(c[i])) for c in cols) for i in range(len(pos))]
    Path(path).write_text("\n".join(lines + body) + "\n")


def read_ply(path) -> tuple[np.ndarray, dict]:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise FormatError("missing ply magic")
    names, n, i = [], None, 1
    while i < len(text) and text[i].strip() != "end_header":
        parts = text[i].split()
        if parts[:2] == ["format", "ascii"]:
            pass
        elif parts[0] == "format":
            raise FormatError("only ASCII PLY is supported")
        elif parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[0] == "property":
            names.append(parts[-1])
        i += 1
    if n is None or i == len(text):
        raise FormatError("incomplete PLY header")
    rows = [list(map(float, ln.split())) for ln in text[i + 1:i + 1 + n]]
    data = np.array(rows, dtype=float).reshape(n, len(names))
    cols = {k: data[:, j] for j, k in enumerate(names)}
    pos = np.stack([cols.pop("x"), cols.pop("y"), cols.pop("z")], axis=1) if n else np.zeros((0, 3))
    if not n:
        cols = {k: np.zeros(0) for k in names if k not in ("x", "y", "z")}
    return pos, cols


# ---------------------------------------------------------------- config files

class ConfigKeyError(ValueError):
    pass


def _coerce(value: str, typ, key: str):
    try:
        if typ in (bool, "bool"):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ in (int, "int"):
            return int(value)
        if typ in (float, "float"):
            return float(value)
        return value.strip()
    except ValueError:
        raise ConfigKeyError(f"bad value for {key}: {value!r}") from None


def parse_sections(text: str, schema: dict[str, dict[str, type]]) -> dict[str, dict]:
    """Parse `[section]` / `key = value` text against a {section: {key: type}} schema.

    Unknown sections or keys raise ConfigKeyError naming the offender.
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigKeyError(f"malformed config: {e}") from None
    out: dict[str, dict] = {}
    for sec in cp.sections():
        if sec not in schema:
            raise ConfigKeyError(f"unknown config section: [{sec}]")
        out[sec] = {}
        for key, raw in cp.items(sec):
            if key not in schema[sec]:
                raise ConfigKeyError(f"unknown config key: {sec}.{key}")
            out[sec][key] = _coerce(raw, schema[sec][key], f"{sec}.{key}")
    return out


def write_sections(values: dict[str, dict]) -> str:
    buf = io.StringIO()
    for sec, kv in values.items():
        buf.write(f"[{sec}]\n")
        for k, v in kv.items():
            buf.write(f"{k} = {v}\n")
        buf.write("\n")
    return buf.getvalue()


# ---------------------------------------------------------------- model container

DENSITY_MAGIC = b"DEGD"
DECODER_MAGIC = b"DEGA"
META_MAGIC = b"META"
CONTAINER_VERSION = 1


def encode_density(d: OctreeDensity) -> bytes:
    recs = [(lvl, int(p), row) for lvl, t in enumerate(d.tables) for p, row in zip(t.paths, t.logits)]
    head = DENSITY_MAGIC + struct.pack("<BB6dI", CONTAINER_VERSION, d.levels, *d.domain_min, *d.domain_max, len(recs))
    body = b"".join(struct.pack("<BQ8d", lvl, p, *row) for lvl, p, row in recs)
    return head + body


def decode_density(buf: bytes, offset: int = 0) -> tuple[OctreeDensity, int]:
    if buf[offset:offset + 4] != DENSITY_MAGIC:
        raise FormatError("missing DEGD magic")
    ver, L, *dom, n = struct.unpack_from("<BB6dI", buf, offset + 4)
    if ver != CONTAINER_VERSION:
        raise FormatError(f"unsupported container version {ver}")
    pos = offset + 4 + struct.calcsize("<BB6dI")
    d = OctreeDensity(L, np.array(dom[:3]), np.array(dom[3:]))
    rec = struct.calcsize("<BQ8d")
    per_level: dict[int, list] = {}
    for i in range(n):
        lvl, p, *row = struct.unpack_from("<BQ8d", buf, pos + i * rec)
        if lvl >= L:
            raise FormatError(f"record level {lvl} outside a {L}-level octree")
        per_level.setdefault(lvl, []).append((p, row))
    for lvl, items in per_level.items():
        items.sort()
        d.tables[lvl] = LevelTable(np.array([p for p, _ in items], dtype=np.int64),
                                   np.array([r for _, r in items], dtype=float))
    return d, pos + n * rec


def encode_decoder(p: DecoderParams) -> bytes:
    out = [DECODER_MAGIC, struct.pack("<BIII2d6d", CONTAINER_VERSION, p.K, p.fourier_bands, p.hidden,
                                      p.offset_scale, p.base_log_scale, *p.domain_min, *p.domain_max)]
    for name in WEIGHT_NAMES:
        w = np.asarray(p.weights[name], dtype="<f8")
        out.append(struct.pack("<B", w.ndim) + struct.pack(f"<{w.ndim}I", *w.shape) + w.tobytes())
    return b"".join(out)


def decode_decoder(buf: bytes, offset: int) -> tuple[DecoderParams, int]:
    if buf[offset:offset + 4] != DECODER_MAGIC:
        raise FormatError("missing DEGA magic")
    fmt = "<BIII2d6d"
    ver, K, bands, hidden, oscale, bscale, *dom = struct.unpack_from(fmt, buf, offset + 4)
    if ver != CONTAINER_VERSION:
        raise FormatError(f"unsupported decoder section version {ver}")
    pos = offset + 4 + struct.calcsize(fmt)
    p = DecoderParams(K, bands, hidden, oscale, bscale, np.array(dom[:3]), np.array(dom[3:]))
    for name in WEIGHT_NAMES:
        (ndim,) = struct.unpack_from("<B", buf, pos)
        shape = struct.unpack_from(f"<{ndim}I", buf, pos + 1)
        pos += 1 + 4 * ndim
        size = int(np.prod(shape)) * 8
        p.weights[name] = np.frombuffer(buf[pos:pos + size], dtype="<f8").reshape(shape).astype(np.float64)
        pos += size
    return p, pos


def save_model(model, path) -> None:
    meta = json.dumps({"background": [float(x) for x in model.background], **model.meta}, sort_keys=True).encode()
    blob = (encode_density(model.density) + encode_decoder(model.decoder)
            + META_MAGIC + struct.pack("<I", len(meta)) + meta)
    Path(path).write_bytes(blob)


def load_model(path):
    from .trainer import FittedModel

    buf = Path(path).read_bytes()
    d, pos = decode_density(buf)
    dec, pos = decode_decoder(buf, pos)
    meta = {}
    if buf[pos:pos + 4] == META_MAGIC:
        (n,) = struct.unpack_from("<I", buf, pos + 4)
        meta = json.loads(buf[pos + 8:pos + 8 + n])
    bg = np.array(meta.pop("background", [0.0, 0.0, 0.0]))
    return FittedModel(d, dec, bg, meta)


def dataclass_schema(cls) -> dict[str, type]:
    types = {"int": int, "float": float, "bool": bool, "str": str}
    return {f.name: types.get(f.type if isinstance(f.type, str) else f.type.__name__, str)
            for f in dataclasses.fields(cls)}
