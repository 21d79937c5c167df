"""
Small-target filtering on a synthetic scene
============================================

The filter turns a hyperspectral cube into a sparse prior map: a global
Mahalanobis distance per pixel, an edge-preserving bilateral smoothing of that
map, and finally a median cut that keeps only the upper half.
"""

import numpy as np

from stad.hsi_io import synth_scene
from stad.stf import StfConfig, small_target_filter

# A 32 x 32 scene with 20 bands and four 4-pixel targets
cube, labels = synth_scene(seed=3, M=32, N=32, B=20, n_targets=4, target_size_px=4, contrast=0.4)
print(cube.data.shape, "target pixels:", int(labels.sum()))

res = small_target_filter(cube, StfConfig(radius=1, sigma_s=1.0, sigma_c=80.0))

# How well does each stage separate targets from background?
for name, z in (("distance", res.distance), ("filtered", res.filtered), ("mask", res.mask)):
    tgt = z[labels == 1].mean()
    bg = z[labels == 0].mean()
    print(f"{name:9s} mean on targets {tgt:10.3f}   mean on background {bg:8.3f}")

# The mask keeps strictly fewer than half of the pixels
print("non-zero mask fraction:", np.count_nonzero(res.mask) / res.mask.size)


def ascii_map(z, levels=" .:-=+*#%@"):
    z = (z - z.min()) / (np.ptp(z) or 1.0)
    idx = np.minimum((z * len(levels)).astype(int), len(levels) - 1)
    return "\n".join("".join(levels[i] for i in row) for row in idx)


print("labels:")
print(ascii_map(labels.astype(float)))
print("mask:")
print(ascii_map(res.mask))
