"""
Tracking a synthetic orbit
==========================

A camera circles a ball of landmarks. Observations come straight from the
scene (no image), so the tracker's geometry can be checked against exact
ground truth, first noise-free, then with pixel noise and descriptor
outliers. Both association strategies are run: frame-to-frame matching of
full feature sets (``selm``) and the constant-velocity window search
(``baseline``).
"""

# %%
import sys
from pathlib import Path

from selmvo.evaluation import compute_ate, format_stats, plot_trajectory
from selmvo.matcher import BuiltinMatcher
from selmvo.synthscene import NoiseModel, SyntheticExtractor, make_orbit_scene
from selmvo.tracker import TrackerConfig, track_sequence

out = Path(sys.argv[1] if len(sys.argv) > 1 else "notebook_output")
out.mkdir(exist_ok=True)
frames = 60

# %%
for label, noise in (("noise-free", NoiseModel()), ("noisy", NoiseModel(0.5, 0.0, 0.1))):
    scene = make_orbit_scene(frames=frames, seed=0, noise=noise)
    for mode in ("selm", "baseline"):
        cfg = TrackerConfig(mode=mode)
        traj, tel = track_sequence(scene.frames(), scene.intrinsics, cfg,
                                   SyntheticExtractor(scene), BuiltinMatcher())
        kfs = sum(r.keyframe_inserted for r in tel)
        print(f"{label:10s} {mode:8s} {len(traj)}/{frames} poses, {kfs} keyframes")
        stats = compute_ate(traj, scene.ground_truth())
        print(f"    ATE rmse {stats.rmse * 1000:.3f} mm;", format_stats(stats))
        plot_trajectory(traj, scene.ground_truth(), out / f"orbit_{label}_{mode}.svg",
                        title=f"orbit, {label}, {mode}")

# %% With noise the tracked ratio hovers below 0.9, so keyframes are frequent.
# Noise-free, new map points are created only when the 30-frame cap forces it
# or when the view has turned far enough that fewer than 90% remain tracked.
print("plots in", out)
