"""Write one synthetic scene (images, masks, flow) as netpbm files.

    python3 demos/export_scene.py 7 "rotate(15)" out/scene7
"""
import sys

from warpnorm import synth as S

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
motion = sys.argv[2] if len(sys.argv) > 2 else "random"
out = sys.argv[3] if len(sys.argv) > 3 else f"runs/scene{seed}"
scene = S.gen_scene(seed, S.SceneSpec(motion=S.Motion.parse(motion)))
S.save_scene(scene, out)
print(f"{scene.motion} -> {out}")
