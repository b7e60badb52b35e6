"""Reward pathway on vs off at a low anchor budget, several seeds.

    python scripts/run_reward_ablation.py --out runs/ablation --seeds 5
"""

import argparse

from octsplat.config import load_fit_config
from octsplat.experiments import SeedSpec, reward_ablation, write_results
from octsplat.scenes import synth_scene

ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
ap.add_argument("--config", default="configs/reward_ablation.ini")
ap.add_argument("--scene", default="thin")
ap.add_argument("--seeds", default="5")
ap.add_argument("--budget", type=int, default=128)
ap.add_argument("--out", required=True)
a = ap.parse_args()

cfg = load_fit_config(a.config)
targets = synth_scene(a.scene, size=cfg.image_size, views=cfg.views)
rows, summary = reward_ablation(cfg, targets, SeedSpec(a.seeds).values(), eval_P=a.budget)
write_results(rows, summary, a.out, "reward_ablation")
print(f"mean gain {summary['mean_gain_db']:+.3f} dB")
