"""Multi-seed desk experiments: reward ablation, budget sweep and the token-order toy.

Each runner returns plain rows plus a summary dict, and can write both as CSV/JSON.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .fmtoy import FMConfig, train_toy
from .scenes import TargetSet
from .trainer import FitConfig, evaluate, fit

ABLATION_MIN_GAIN_DB = 0.3
TOY_MIN_WIN_FRACTION = 0.8   # four of five seeds


def mean_psnr(model, targets: TargetSet, P: int, eval_seeds) -> float:
    return float(np.mean([evaluate(model, targets, P, s)["psnr"] for s in eval_seeds]))


def _with(cfg: FitConfig, **kw) -> FitConfig:
    return FitConfig(**{**cfg.to_dict(), **kw})


def reward_ablation(cfg: FitConfig, targets: TargetSet, seeds, eval_P: int = 128, eval_seeds=(0, 1, 2),
                    log=print) -> tuple[list[dict], dict]:
    """PSNR with and without the contribution reward, same seed and config otherwise."""
    rows = []
    for seed in seeds:
        res = {}
        for flag in (True, False):
            model, _ = fit(_with(cfg, seed=seed, contribution_reward=flag), targets)
            res[flag] = mean_psnr(model, targets, eval_P, eval_seeds)
        rows.append({"seed": seed, "psnr_reward": res[True], "psnr_no_reward": res[False],
                     "gain_db": res[True] - res[False]})
        log(f"seed {seed}: {res[True]:.3f} vs {res[False]:.3f} dB (gain {res[True] - res[False]:+.3f})")
    gain = float(np.mean([r["gain_db"] for r in rows]))
    return rows, {"mean_gain_db": gain, "threshold_db": ABLATION_MIN_GAIN_DB, "pass": gain >= ABLATION_MIN_GAIN_DB}


def budget_sweep(cfg: FitConfig, targets: TargetSet, seeds, budgets=(64, 128, 256, 512), eval_seeds=(0, 1),
                 log=print) -> tuple[list[dict], dict]:
    """One fit per seed, evaluated at each budget."""
    rows = []
    for seed in seeds:
        model, _ = fit(_with(cfg, seed=seed), targets)
        vals = [mean_psnr(model, targets, P, eval_seeds) for P in budgets]
        rows += [{"seed": seed, "P": P, "psnr": v} for P, v in zip(budgets, vals)]
        log(f"seed {seed}: " + ", ".join(f"P={P} {v:.2f}" for P, v in zip(budgets, vals)))
    means = [float(np.mean([r["psnr"] for r in rows if r["P"] == P])) for P in budgets]
    rho = float(spearmanr([r["P"] for r in rows], [r["psnr"] for r in rows]).statistic)
    monotone = bool(np.all(np.diff(means) >= 0))
    return rows, {"budgets": list(budgets), "mean_psnr": means, "non_decreasing": monotone, "spearman_rho": rho,
                  "pass": monotone and rho > 0}


def token_order_toy(cfg: FMConfig, seeds, log=print) -> tuple[list[dict], dict]:
    """Final validation loss of the reordered and unordered variants per seed."""
    rows = []
    for seed in seeds:
        res = {}
        for variant in ("reordered", "unordered"):
            res[variant] = train_toy(FMConfig(**{**asdict(cfg), "seed": seed, "variant": variant}))[-1]["val_loss"]
        rows.append({"seed": seed, "val_reordered": res["reordered"], "val_unordered": res["unordered"],
                     "reordered_wins": res["reordered"] < res["unordered"]})
        log(f"seed {seed}: reordered {res['reordered']:.4f}, unordered {res['unordered']:.4f}")
    wins = sum(r["reordered_wins"] for r in rows)
    need = int(np.ceil(TOY_MIN_WIN_FRACTION * len(rows) - 1e-9))
    return rows, {"wins": wins, "seeds": len(rows), "required": need, "pass": wins >= need}


def write_results(rows: list[dict], summary: dict, out_dir, stem: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    (out / f"{stem}_summary.json").write_text(json.dumps(summary, indent=1) + "\n")


@dataclass
class SeedSpec:
    """`--seeds 5` means seeds 0..4; `--seeds 3,7` means exactly those."""
    text: str

    def values(self) -> list[int]:
        if "," in self.text:
            return [int(s) for s in self.text.split(",") if s]
        return list(range(int(self.text)))
