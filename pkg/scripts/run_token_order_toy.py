"""Flow-matching toy: Sobol-reordered tokens vs shuffled tokens.

    python scripts/run_token_order_toy.py --out runs/toy --seeds 5
"""

import argparse

from octsplat.experiments import SeedSpec, token_order_toy, write_results
from octsplat.fmtoy import FMConfig

ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
ap.add_argument("--seeds", default="5")
ap.add_argument("--steps", type=int, default=FMConfig.steps)
ap.add_argument("--out", required=True)
a = ap.parse_args()

rows, summary = token_order_toy(FMConfig(steps=a.steps), SeedSpec(a.seeds).values())
write_results(rows, summary, a.out, "token_order_toy")
print(f"reordered wins {summary['wins']}/{summary['seeds']}")
