"""A small flow-matching testbed: does a canonical token order help a per-token velocity model?

Each synthetic asset is a clustered point set. In the ``reordered`` variant tokens are
serialized onto Sobol anchors and the model sees the anchor embedding; in ``unordered``
tokens are shuffled and the embedding is zero. The network has no attention, so the only
way it can tell tokens apart is through the embedding. That makes this a mechanism
check only. It says nothing about large transformer backbones.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from .optim import Adam
from .vecseq import serialize, sobol3d

VARIANTS = ("reordered", "unordered")
CURVE_COLUMNS = ("step", "train_loss", "val_loss")


class ShapeMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class FMConfig:
    M: int = 64
    feature_dim: int = 3
    steps: int = 1500
    batch: int = 32
    lr: float = 3e-3
    seed: int = 0
    variant: str = "reordered"
    hidden: int = 64
    pe_dim: int = 12
    train_assets: int = 256
    val_assets: int = 64
    eval_every: int = 100
    cluster_sigma: float = 0.05

    def __post_init__(self):
        for name in ("M", "feature_dim", "batch", "hidden", "pe_dim", "train_assets", "val_assets", "eval_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    @property
    def C(self) -> int:
        return 3 + self.feature_dim


def fm_loss(v_out, x0, eps) -> tuple[float, np.ndarray]:
    """Mean over tokens of ||v - (eps - x0)||^2, with its gradient w.r.t. v."""
    v_out, x0, eps = (np.asarray(a, dtype=float) for a in (v_out, x0, eps))
    if not (v_out.shape == x0.shape == eps.shape):
        raise ShapeMismatch(f"{v_out.shape}, {x0.shape}, {eps.shape}")
    r = v_out - (eps - x0)
    tokens = r.size // r.shape[-1]
    return float(np.sum(r * r) / tokens), 2.0 * r / tokens


def interpolate(x0, eps, t):
    t = np.asarray(t, dtype=float)
    return (1.0 - t) * x0 + t * eps


# ---------------------------------------------------------------- data

def _centers(rng, k: int, min_sep: float = 0.2) -> np.ndarray:
    while True:
        c = rng.uniform(0.15, 0.85, size=(k, 3))
        d = np.linalg.norm(c[:, None] - c[None], axis=2)
        if np.all(d[np.triu_indices(k, 1)] >= min_sep):
            return c


def make_asset(rng, M: int, feature_dim: int = 3, sigma: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """(points M x 3 in [0,1], tokens M x (3 + feature_dim)); the feature is the point's cluster code."""
    k = int(rng.integers(3, 6))
    centers = _centers(rng, k)
    codes = rng.uniform(-1, 1, size=(k, feature_dim))
    label = rng.integers(0, k, size=M)
    pts = np.clip(centers[label] + sigma * rng.normal(size=(M, 3)), 0.0, 1.0)
    feats = codes[label] + 0.05 * rng.normal(size=(M, feature_dim))
    return pts, np.concatenate([2.0 * pts - 1.0, feats], axis=1)


@dataclass
class ToyDataset:
    tokens: np.ndarray     # (A, M, C)
    pe: np.ndarray         # (M, pe_dim), zeros for the unordered variant
    points: np.ndarray     # (A, M, 3) in the stored token order
    order: np.ndarray      # (A, M) stored slot -> generated index

    def permute(self, per_token):
        """Apply the stored order to an (A, M, ...) array drawn in generation order."""
        idx = self.order.reshape(self.order.shape + (1,) * (per_token.ndim - 2))
        return np.take_along_axis(per_token, idx, axis=1)


def make_dataset(seed: int, n_assets: int, M: int, variant: str, feature_dim: int = 3, pe_dim: int = 12,
                 sigma: float = 0.05) -> ToyDataset:
    """Assets depend only on seed; the variant only changes token order and embedding."""
    rng = np.random.default_rng(seed)
    raw = [make_asset(rng, M, feature_dim, sigma) for _ in range(n_assets)]
    anchors = sobol3d(M)
    toks, pts, orders = [], [], []
    shuffle = np.random.default_rng([seed, 1])
    pe = None
    for p, z in raw:
        if variant == "reordered":
            s = serialize(z, p, anchors, pe_dim)
            perm = s.order
            pe = s.anchor_pe
        else:
            perm = shuffle.permutation(M)
        toks.append(z[perm])
        pts.append(p[perm])
        orders.append(perm)
    if pe is None:
        pe = np.zeros((M, pe_dim))
    return ToyDataset(np.stack(toks), pe, np.stack(pts), np.stack(orders))


def anchor_correlation(ds: ToyDataset) -> np.ndarray:
    """Per-axis Pearson r between stored point coordinates and the Sobol anchor of their slot."""
    M = ds.points.shape[1]
    anc = np.broadcast_to(sobol3d(M).points, ds.points.shape).reshape(-1, 3)
    pts = ds.points.reshape(-1, 3)
    return np.array([np.corrcoef(pts[:, a], anc[:, a])[0, 1] for a in range(3)])


# ---------------------------------------------------------------- model

def init_velocity_net(rng, C: int, pe_dim: int, hidden: int) -> dict:
    return {
        "Wx": rng.normal(scale=1 / np.sqrt(C + 1), size=(C, hidden)),
        "wt": rng.normal(scale=1 / np.sqrt(C + 1), size=hidden),
        "Wp": np.zeros((pe_dim, hidden)),   # starts inert so both variants begin from the same function
        "b1": np.zeros(hidden),
        "W2": rng.normal(scale=1 / np.sqrt(hidden), size=(hidden, C)),
        "b2": np.zeros(C),
    }


def _silu(x):
    s = expit(x)
    return x * s, s * (1 + x * (1 - s))


def velocity(params: dict, xt, t, pe):
    """xt (B, M, C), t (B,), pe (M, D) -> v (B, M, C) and a cache for the backward pass."""
    pre = xt @ params["Wx"] + t[:, None, None] * params["wt"] + (pe @ params["Wp"])[None] + params["b1"]
    h, dh = _silu(pre)
    return h @ params["W2"] + params["b2"], (xt, t, pe, h, dh)


def velocity_backward(params: dict, g_v, cache) -> dict:
    xt, t, pe, h, dh = cache
    C, H = params["W2"].shape[1], params["W2"].shape[0]
    g_pre = (g_v @ params["W2"].T) * dh
    return {
        "W2": h.reshape(-1, H).T @ g_v.reshape(-1, C),
        "b2": g_v.reshape(-1, C).sum(0),
        "Wx": xt.reshape(-1, C).T @ g_pre.reshape(-1, H),
        "wt": np.einsum("b,bmh->h", t, g_pre),
        "Wp": pe.T @ g_pre.sum(0),
        "b1": g_pre.reshape(-1, H).sum(0),
    }


def batch_loss(params, x0, pe, t, eps, with_grad=True):
    xt = interpolate(x0, eps, t[:, None, None])
    v, cache = velocity(params, xt, t, pe)
    loss, g_v = fm_loss(v, x0, eps)
    return loss, (velocity_backward(params, g_v, cache) if with_grad else None)


# ---------------------------------------------------------------- training

def train_toy(cfg: FMConfig) -> list[dict]:
    """Returns curve rows {step, train_loss, val_loss}; step 0 is the untrained model."""
    train = make_dataset(cfg.seed, cfg.train_assets, cfg.M, cfg.variant, cfg.feature_dim, cfg.pe_dim,
                         cfg.cluster_sigma)
    val = make_dataset(cfg.seed + 100_000, cfg.val_assets, cfg.M, cfg.variant, cfg.feature_dim, cfg.pe_dim,
                       cfg.cluster_sigma)
    params = init_velocity_net(np.random.default_rng([cfg.seed, 2]), cfg.C, cfg.pe_dim, cfg.hidden)
    vrng = np.random.default_rng([cfg.seed, 3])
    val_t = vrng.uniform(size=cfg.val_assets)
    val_eps = val.permute(vrng.normal(size=val.tokens.shape))
    brng = np.random.default_rng([cfg.seed, 4])
    opt = Adam(lr=cfg.lr)

    def val_loss():
        return batch_loss(params, val.tokens, val.pe, val_t, val_eps, with_grad=False)[0]

    rows = [{"step": 0, "train_loss": _initial_train(params, train, cfg), "val_loss": val_loss()}]
    recent = []
    for step in range(1, cfg.steps + 1):
        idx = brng.integers(0, cfg.train_assets, size=cfg.batch)
        t = brng.uniform(size=cfg.batch)
        eps = brng.normal(size=(cfg.batch, cfg.M, cfg.C))
        loss, grads = batch_loss(params, train.tokens[idx], train.pe, t, eps)
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"non-finite flow-matching loss at step {step}")
        opt.step(params, grads)
        recent.append(loss)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            rows.append({"step": step, "train_loss": float(np.mean(recent)), "val_loss": val_loss()})
            recent = []
    return rows


def _initial_train(params, train: ToyDataset, cfg: FMConfig) -> float:
    # A fixed probe batch on its own stream, so it does not shift the training batches.
    r = np.random.default_rng([cfg.seed, 5])
    idx = r.integers(0, cfg.train_assets, size=cfg.batch)
    t = r.uniform(size=cfg.batch)
    eps = r.normal(size=(cfg.batch, cfg.M, cfg.C))
    eps = np.take_along_axis(eps, train.order[idx][:, :, None], axis=1)
    return batch_loss(params, train.tokens[idx], train.pe, t, eps, with_grad=False)[0]


def write_curves(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for r in rows:
            w.writerow([r["step"], repr(float(r["train_loss"])), repr(float(r["val_loss"]))])


def read_curves(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"step": int(r["step"]), "train_loss": float(r["train_loss"]), "val_loss": float(r["val_loss"])}
                for r in csv.DictReader(fh)]


def compare_variants(cfg: FMConfig) -> dict:
    """Final validation loss of both variants under otherwise identical settings."""
    out = {}
    for variant in VARIANTS:
        rows = train_toy(FMConfig(**{**asdict(cfg), "variant": variant}))
        out[variant] = rows[-1]["val_loss"]
    return out
