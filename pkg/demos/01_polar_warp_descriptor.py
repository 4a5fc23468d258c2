"""
Polar sampling, thin-plate warps and rotation-invariant descriptors
===================================================================

Walks one keypoint through the describe path: the identity polar grid,
a TPS-bent version of it, and the descriptor's response to orientation.
"""

import numpy as np

from deal.geometry import Keypoint, control_points_lattice, make_polar_grid, tps_warp
from deal.network import ArchConfig, describe, init_weights, plain_polar_patch
from deal.pipeline.io import save_image
from deal.simulator import procedural_texture

# a textured test image; any HxWx3 float array in [0, 1] will do
img = procedural_texture(seed=1, size=256)
kp = Keypoint(128.0, 128.0, 4.0, 0.3)

# Identity polar grid: row a is the ray at angle orientation + 2*pi*a/32
grid = make_polar_grid(kp, 32, 32, support_factor=6.0)
print("grid shape", grid.shape, "outer radius", np.linalg.norm(grid[0, -1] - [kp.x, kp.y]))

# Sampling along the grid gives a 32x32 "unrolled" patch (angle x radius)
patch = plain_polar_patch(img, kp, ArchConfig())
save_image("polar_patch.png", np.repeat(patch[..., None], 3, -1) if patch.ndim == 2 else patch)

# A TPS bends the normalised grid.  theta = 6 affine + 2*64 control weights;
# all zeros is the identity, which is where the regressor starts.
cp = control_points_lattice(8)
theta = np.zeros((1, 6 + 2 * len(cp)))
theta[0, 6:6 + len(cp)] = 0.02 * np.random.default_rng(0).standard_normal(len(cp))
unit = (grid - [kp.x, kp.y]) / (kp.size * 6.0)
bent = tps_warp(theta, unit[None], cp).value[0]
print("mean displacement of the bent grid (unit frame):", np.linalg.norm(bent - unit, axis=-1).mean())

# Orientation: shifting by 45 degrees is a shift by 4 angular rows, which the
# angular average pooling absorbs.
w = init_weights(ArchConfig(), seed=0)
d0 = describe(img, None, [kp], w).descriptors[0]
for deg in (45, 90, 180):
    k2 = Keypoint(kp.x, kp.y, kp.size, kp.orientation + np.deg2rad(deg))
    d1 = describe(img, None, [k2], w).descriptors[0]
    print(f"orientation +{deg:3d} deg: descriptor change {np.linalg.norm(d1 - d0):.2e}")
