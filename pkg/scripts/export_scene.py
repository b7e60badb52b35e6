"""Write a bundled synthetic scene as a target directory (cameras.json, PNG views, points.ply).

    python scripts/export_scene.py --scene sphere --views 12 --out data/sphere
"""

import argparse

from octsplat.config import save_targets
from octsplat.scenes import SCENE_NAMES, synth_scene

ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
ap.add_argument("--scene", choices=SCENE_NAMES, default="thin")
ap.add_argument("--size", type=int, default=32)
ap.add_argument("--views", type=int, default=8)
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--out", required=True)
a = ap.parse_args()

save_targets(synth_scene(a.scene, a.seed, a.size, a.views), a.out)
print(f"wrote {a.views} views to {a.out}")
