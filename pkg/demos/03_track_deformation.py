"""
Tracking a deforming surface with RANSAC + TPS
==============================================

Feeds descriptor matches between two cloth states to the robust tracker and
compares the recovered warp against the simulator's ground truth.
"""

import numpy as np

from deal.network import ArchConfig, describe, init_weights
from deal.pipeline.matching import match_nn
from deal.pipeline.tracking import ransac_tps_track
from deal.simulator import SimConfig, generate_pair, transfer_points

pair = generate_pair(SimConfig(width=320, height=240, max_keypoints=300), seed=5)
w = init_weights(ArchConfig(), seed=0)
da = describe(pair.image_a, None, pair.keypoints_a, w).descriptors
db = describe(pair.image_b, None, pair.keypoints_b, w).descriptors
matches = match_nn(da, db, mutual=True)

pts = np.array([[[pair.keypoints_a[m.index_a].x, pair.keypoints_a[m.index_a].y],
                 [pair.keypoints_b[m.index_b].x, pair.keypoints_b[m.index_b].y]] for m in matches])
warp, inliers = ransac_tps_track(pts, iterations=1500)
print(f"{inliers.sum()} of {len(pts)} matches kept")

# Ground truth for every on-cloth pixel of a coarse lattice
ys, xs = np.mgrid[20:220:10, 20:300:10]
grid = np.stack([xs.ravel(), ys.ravel()], 1).astype(float)
truth = transfer_points(pair.render_a, pair.grid_a, pair.grid_b, pair.render_b.camera, grid, pair.render_b)
ok = ~np.isnan(truth).any(1)
err = np.linalg.norm(warp.apply(grid[ok]) - truth[ok], axis=1)
print(f"warp error on {ok.sum()} lattice points: median {np.median(err):.2f}px, 90th pct {np.percentile(err, 90):.2f}px")
# errors grow away from the matched region, where the spline extrapolates
