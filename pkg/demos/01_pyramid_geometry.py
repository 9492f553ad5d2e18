"""How the pyramid pooling layer carves a feature map into bins.

The bin rule is kernel = stride = ceil(n / l). When l divides n every bin
has the same size. Otherwise the last window is clipped at the border, and
for l close to n the layer produces fewer than l bins. This script prints
both cases and then follows the channel count through one layer.

    python3 demos/01_pyramid_geometry.py
"""
import numpy as np

from apnet.model import ApnetConfig
from apnet.spp import SppConfig, init_level_convs, spp_bin_geometry, spp_forward
from apnet.tensor import Tensor

print("feature side n, level l -> kernel, stride, bins")
for n in (24, 10, 7, 6, 3):
    cells = []
    for level in (1, 2, 3, 6):
        k, _, out = spp_bin_geometry(n, level)
        note = "" if out == level else "*"
        cells.append(f"l={level}: k={k:<2d} bins={out}{note}")
    print(f"  n={n:<3d}", "   ".join(cells))
print("  (* fewer bins than requested: the ceiling rule drifts when l is close to n)\n")

cfg = SppConfig(levels=[1, 2, 3, 6], in_channels=8)
convs = init_level_convs(cfg, np.random.default_rng(0))
feature = Tensor(np.random.default_rng(1).standard_normal((1, 8, 6, 6)).astype(np.float32))
out = spp_forward(feature, cfg, convs)
print(f"SPP on {feature.shape}: {cfg.in_channels} input channels + "
      f"{len(cfg.levels)} levels x {cfg.reduced_channels} reduced = {out.shape[1]} channels, "
      f"spatial {out.shape[2]}x{out.shape[3]}")

print("\nWhere each scale of the network lands (sides snap to multiples of 8):")
for size in (48, 64, 96):
    model = ApnetConfig(input_size=size)
    print(f"  input {size}: resized sides {model.scaled_sides()} -> feature sides {model.feature_sides()}")
