"""PSNR at several anchor budgets from one fit per seed.

    python scripts/run_budget_sweep.py --out runs/budget --seeds 5
"""

import argparse

from octsplat.config import load_fit_config
from octsplat.experiments import SeedSpec, budget_sweep, write_results
from octsplat.scenes import synth_scene

ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
ap.add_argument("--config", default="configs/budget_sweep.ini")
ap.add_argument("--scene", default="thin")
ap.add_argument("--seeds", default="5")
ap.add_argument("--budgets", default="64,128,256,512")
ap.add_argument("--out", required=True)
a = ap.parse_args()

cfg = load_fit_config(a.config)
targets = synth_scene(a.scene, size=cfg.image_size, views=cfg.views)
budgets = tuple(int(b) for b in a.budgets.split(","))
rows, summary = budget_sweep(cfg, targets, SeedSpec(a.seeds).values(), budgets)
write_results(rows, summary, a.out, "budget_sweep")
print("mean PSNR per budget:", ", ".join(f"{P}: {v:.2f}" for P, v in zip(budgets, summary["mean_psnr"])),
      f"| spearman {summary['spearman_rho']:.3f}")
