"""Sparse map: frames, keyframes, map points and field-of-view queries."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import EmptyReference, WriteFailure
from .frontend import FeatureSet
from .geometry import Intrinsics, Pose, backproject, inverse

Z_MIN = 0.05
Z_MAX = 40.0
NO_MATCH = -1


@dataclass
class Frame:
    id: int
    timestamp: float
    features: FeatureSet
    depth_at_keypoints: np.ndarray  # meters, 0 = invalid
    pose: Optional[Pose] = None  # world-from-camera
    matches_to_map: np.ndarray = None  # map point id per keypoint, NO_MATCH if none

    def __post_init__(self):
        n = len(self.features)
        self.depth_at_keypoints = np.asarray(self.depth_at_keypoints, dtype=np.float64).reshape(-1)
        if len(self.depth_at_keypoints) != n:
            raise ValueError("depth_at_keypoints length differs from features")
        if self.matches_to_map is None:
            self.matches_to_map = np.full(n, NO_MATCH, dtype=np.int64)
        else:
            self.matches_to_map = np.asarray(self.matches_to_map, dtype=np.int64).reshape(n)

    def __len__(self):
        return len(self.features)

    def tracked_ids(self):
        m = self.matches_to_map
        return m[m != NO_MATCH]


@dataclass
class KeyFrame:
    frame: Frame
    id: int

    @property
    def pose(self):
        return self.frame.pose


@dataclass
class MapPoint:
    id: int
    position: np.ndarray
    descriptor: np.ndarray
    origin: tuple  # (keyframe id, keypoint index)
    observation_count: int = 1


@dataclass
class WorldMap:
    keyframes: dict = field(default_factory=dict)  # id -> KeyFrame, insertion ordered
    map_points: dict = field(default_factory=dict)  # id -> MapPoint
    reference_keyframe: Optional[int] = None
    _cache: tuple = field(default=None, repr=False)

    def add_keyframe(self, frame: Frame) -> KeyFrame:
        """Snapshot ``frame`` as a new keyframe and make it the reference."""
        if frame.pose is None:
            raise ValueError("keyframe needs a pose")
        snap = Frame(frame.id, frame.timestamp, frame.features, frame.depth_at_keypoints.copy(),
                     frame.pose, frame.matches_to_map.copy())
        kf = KeyFrame(snap, len(self.keyframes))
        self.keyframes[kf.id] = kf
        self.reference_keyframe = kf.id
        return kf

    @property
    def reference(self) -> Optional[KeyFrame]:
        if self.reference_keyframe is None:
            return None
        return self.keyframes[self.reference_keyframe]

    def add_observations(self, ids):
        for i in ids:
            self.map_points[int(i)].observation_count += 1

    def arrays(self):
        """(ids, positions, descriptors) of every map point, cached until the map grows."""
        n = len(self.map_points)
        if self._cache is None or len(self._cache[0]) != n:
            if n == 0:
                self._cache = (np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros((0, 0)))
            else:
                pts = list(self.map_points.values())
                self._cache = (np.array([p.id for p in pts], np.int64),
                               np.array([p.position for p in pts]),
                               np.array([p.descriptor for p in pts]))
        return self._cache

    def create_map_points(self, kf: KeyFrame, k: Intrinsics) -> int:
        return create_map_points(self, kf, k)

    def visible(self, pose: Pose, k: Intrinsics, z_min=Z_MIN, z_max=Z_MAX):
        """Vectorized field-of-view query: (ids, projected uv, descriptors)."""
        ids, pos, desc = self.arrays()
        if len(ids) == 0:
            return ids, np.zeros((0, 2)), desc
        T_cw = inverse(pose)
        pc = pos @ T_cw.R.T + T_cw.translation
        z = pc[:, 2]
        front = (z > z_min) & (z < z_max)
        zs = np.where(front, z, 1.0)
        uv = np.stack([k.fx * pc[:, 0] / zs + k.cx, k.fy * pc[:, 1] / zs + k.cy], axis=1)
        keep = front & k.in_bounds(uv)
        return ids[keep], uv[keep], desc[keep]


def create_map_points(world: WorldMap, kf: KeyFrame, k: Intrinsics) -> int:
    """Backproject every depth-valid, unassociated keyframe keypoint into the map.

    Map points take the observing descriptor and record the keypoint they
    came from. A second call on the same keyframe creates nothing.
    """
    fr = kf.frame
    if fr.pose is None:
        raise ValueError("keyframe has no pose")
    d = fr.depth_at_keypoints
    todo = np.nonzero((d > 0) & np.isfinite(d) & (fr.matches_to_map == NO_MATCH))[0]
    if todo.size == 0:
        return 0
    pw = fr.pose.apply(backproject(fr.features.keypoints[todo], d[todo], k))
    next_id = max(world.map_points, default=-1) + 1
    for n, (i, p) in enumerate(zip(todo, pw)):
        mid = next_id + n
        world.map_points[mid] = MapPoint(mid, p, fr.features.descriptors[i].copy(),
                                         (kf.id, int(i)))
        fr.matches_to_map[i] = mid
    return int(todo.size)


def visible_map_points(world: WorldMap, pose: Pose, k: Intrinsics, z_min=Z_MIN, z_max=Z_MAX):
    """Map points in the camera frustum with their projections.

    Camera-frame depth must lie in ``(z_min, z_max)`` and the projection in
    the image.
    """
    ids, uv, _ = world.visible(pose, k, z_min, z_max)
    return [(world.map_points[int(i)], xy) for i, xy in zip(ids, uv)]


def tracked_ratio(frame: Frame, ref: KeyFrame) -> float:
    """Fraction of the reference keyframe's map points that ``frame`` re-observes."""
    ref_ids = np.unique(ref.frame.tracked_ids())
    if ref_ids.size == 0:
        raise EmptyReference(f"keyframe {ref.id} has no map points")
    seen = np.isin(ref_ids, frame.tracked_ids())
    return float(np.count_nonzero(seen)) / ref_ids.size


def export_map_points(world: WorldMap, path):
    """Write ``id x y z`` lines, one per map point, in id order."""
    lines = [f"{p.id} {p.position[0]:.6f} {p.position[1]:.6f} {p.position[2]:.6f}\n"
             for p in sorted(world.map_points.values(), key=lambda p: p.id)]
    try:
        Path(path).write_text("".join(lines))
    except OSError as e:
        raise WriteFailure(f"cannot write {path}: {e}") from e
