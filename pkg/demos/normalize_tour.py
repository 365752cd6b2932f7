"""Apply each normalisation layer to a toy activation and print summary numbers."""
import numpy as np

from warpnorm import ModulationMaps, NormVariant, adain, msawn, sain, sawn
from warpnorm import synth as S

rng = np.random.default_rng(0)
h = rng.standard_normal((1, 4, 16, 16))
mod = ModulationMaps(1 + 0.1 * rng.standard_normal(h.shape), rng.standard_normal(h.shape))
flow = S.gen_flow("translate", (2.0, -1.5), 16, 16)
occ = S.derive_occlusion(flow)
region = np.zeros((1, 1, 16, 16))
region[..., 4:12, 4:12] = 1

print("adain   mean %.4f" % adain(h, np.ones((1, 4)), np.zeros((1, 4))).mean())
print("sain    mean %.4f" % sain(h, mod).mean())
for v in NormVariant:
    out = sawn(h, mod, flow, occ, v)
    print(f"{v.value:7s} |out - sain| = {np.abs(out - sain(h, mod)).mean():.4f}")
print("msawn   |out - sawn| = %.4f" % np.abs(msawn(h, mod, flow, occ, region)
                                         - sawn(h, mod, flow, occ)).mean())
