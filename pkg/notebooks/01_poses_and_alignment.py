"""
Poses, the NED convention and trajectory alignment
===================================================

Poses are unit quaternions (w, x, y, z) plus a translation and always mean
world-from-camera. This walk-through builds a small trajectory, moves it
between the NED and camera conventions, and measures absolute trajectory
error after rigid alignment.
"""

# %%
import numpy as np

from selmvo.evaluation import align_rigid, compute_ate, format_stats
from selmvo.geometry import Pose, compose, inverse, ned_to_camera, rebase_trajectory, so3_exp

rng = np.random.default_rng(0)

# %% A wandering trajectory in NED (x north, y east, z down)
steps = [Pose.from_rt(so3_exp(rng.normal(0, 0.02, 3)), [0.1, rng.normal(0, 0.02), 0.0])
         for _ in range(50)]
ned = [Pose.from_rt(np.eye(3), [7.0, -30.0, 3.0])]
for s in steps:
    ned.append(compose(ned[-1], s))

# %% Camera convention, then rebased so the first pose is the identity
cam = rebase_trajectory([ned_to_camera(p) for p in ned])
print("first rebased pose:", cam[0])
print("forward motion now along camera z:", cam[1].translation.round(3))

# distances between poses survive the change of convention
d_ned = np.linalg.norm(ned[10].translation - ned[40].translation)
d_cam = np.linalg.norm(cam[10].translation - cam[40].translation)
print(f"distance 10-40: {d_ned:.6f} (NED) vs {d_cam:.6f} (camera)")

# %% An "estimate": the same path, noisy, in an arbitrary world frame
G = Pose(rng.normal(size=4), rng.normal(size=3))
est = [(i / 30, compose(G, Pose(p.rotation, p.translation + rng.normal(0, 0.01, 3))))
       for i, p in enumerate(cam)]
gt = [(i / 30, p) for i, p in enumerate(cam)]

# %% Alignment recovers the unknown frame change, then errors are plain distances
T = align_rigid(np.array([p.translation for _, p in est]), np.array([p.translation for _, p in gt]))
print("recovered frame change vs truth:",
      np.abs(compose(T, G).matrix() - np.eye(4)).max().round(3))
print(format_stats(compute_ate(est, gt)))
print("inverse round trip:", np.allclose(compose(G, inverse(G)).matrix(), np.eye(4)))
