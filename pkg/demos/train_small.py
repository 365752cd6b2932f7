"""Train each variant briefly on 32x32 scenes and print held-out L1 traces."""
from dataclasses import replace

from warpnorm import train as TR

cfg = TR.TrainConfig(steps=40, batch=2, H=32, W=32, widths=(8, 16, 32), style_widths=(4, 8, 8),
                     n_heldout=4, eval_every=10)
for variant in ("SAN", "SAWS", "SAWN"):
    res = TR.train_pose_transfer(replace(cfg, variant=variant))
    curve = [f"{r['heldout_l1']:.4f}" for r in res.trace if "heldout_l1" in r]
    print(variant, " ".join(curve))
