"""Frame-to-frame tracking, local-map refinement and the keyframe policy.

Two association strategies share everything else:

* ``selm``: match the previous frame's full feature set against the current
  one, no projection and no search window;
* ``baseline``: predict the pose with a constant-velocity model, project the
  previous frame's map points and search a fixed pixel window around each.

Both feed the same PnP solver, the same local-map refinement and the same
keyframe rule.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import (
    EmptyReference, InitializationFailed, InsufficientCorrespondences, InsufficientDepthFeatures,
    NoConsensus, DivergedOptimization, TrackingLost,
)
from .frontend import Extractor
from .geometry import Intrinsics, Pose, compose, inverse
from .matcher import BASELINE_WINDOW_PX, DEFAULT_RATIO, Matcher, window_match
from .posesolver import OptimizerConfig, PoseSolution, RansacConfig, optimize_pose, solve_pnp_ransac
from .worldmap import NO_MATCH, Frame, KeyFrame, WorldMap, create_map_points, tracked_ratio

log = logging.getLogger(__name__)

MODES = ("selm", "baseline")


@dataclass
class TrackerConfig:
    mode: str = "selm"
    keyframe_min_interval: int = 0
    keyframe_max_interval: int = 30
    tracked_ratio_threshold: float = 0.9
    min_matches_frame: int = 50
    min_inliers_pose: int = 30
    lost_patience: int = 5
    seed: int = 0
    baseline_window_px: float = BASELINE_WINDOW_PX
    baseline_ratio: float = DEFAULT_RATIO
    ransac_iterations: int = 300
    inlier_threshold_px: float = 3.0
    huber_delta_px: float = 2.0
    optimizer_iterations: int = 30

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.tracked_ratio_threshold <= 1:
            raise ValueError("tracked_ratio_threshold must be in (0, 1]")
        if not 0 <= self.keyframe_min_interval <= self.keyframe_max_interval:
            raise ValueError("need 0 <= keyframe_min_interval <= keyframe_max_interval")
        if self.lost_patience < 1:
            raise ValueError("lost_patience must be >= 1")
        if self.min_matches_frame < 4 or self.min_inliers_pose < 4:
            raise ValueError("minimum match and inlier counts must be >= 4")

    def ransac(self, frame_id):
        # per-frame stream derived from the run seed
        return RansacConfig(iterations=self.ransac_iterations,
                            inlier_threshold_px=self.inlier_threshold_px,
                            minimum_inliers=self.min_inliers_pose,
                            seed=[int(self.seed), int(frame_id)])

    def optimizer(self):
        return OptimizerConfig(max_iterations=self.optimizer_iterations,
                               huber_delta_px=self.huber_delta_px)

    def as_dict(self):
        return asdict(self)


@dataclass
class TrackResult:
    frame_id: int
    timestamp: float
    status: str  # ok | lost | initialized
    pose: Optional[Pose] = None
    matches_prev: int = 0
    matches_local_map: int = 0
    keyframe_inserted: bool = False
    tracked_ratio: Optional[float] = None
    frames_since_keyframe: int = 0
    reference_keyframe: Optional[int] = None
    retried: bool = False
    map_points: int = 0

    def record(self):
        """Telemetry record (no pose; poses go to the trajectory file)."""
        d = asdict(self)
        d.pop("pose")
        return d


def telemetry_lines(results):
    return "".join(json.dumps(r.record(), sort_keys=True) + "\n" for r in results)


# --------------------------------------------------------------------------- steps


def initialize(first_frame: Frame, k: Intrinsics, cfg: TrackerConfig = None) -> WorldMap:
    """First frame at the identity becomes keyframe 0 and seeds the map."""
    cfg = cfg or TrackerConfig()
    d = first_frame.depth_at_keypoints
    valid = int(np.count_nonzero((d > 0) & np.isfinite(d)))
    if valid < cfg.min_matches_frame:
        raise InsufficientDepthFeatures(
            f"frame {first_frame.id}: {valid} depth-valid keypoints, need {cfg.min_matches_frame}")
    first_frame.pose = Pose.identity()
    world = WorldMap()
    kf = world.add_keyframe(first_frame)
    create_map_points(world, kf, k)
    first_frame.matches_to_map = kf.frame.matches_to_map.copy()
    return world


def predict_pose_constant_velocity(prev: Pose, prev_prev: Pose) -> Pose:
    """Replay the last inter-frame motion once more."""
    return compose(prev, compose(inverse(prev_prev), prev))


def _solve(world: WorldMap, ids, cur: Frame, kp_idx, k, cfg: TrackerConfig) -> PoseSolution:
    ids = np.asarray(ids, dtype=np.int64)
    kp_idx = np.asarray(kp_idx, dtype=np.int64)
    if len(ids) < cfg.min_matches_frame:
        raise TrackingLost(f"frame {cur.id}: {len(ids)} map matches, need {cfg.min_matches_frame}")
    pts = np.array([world.map_points[int(i)].position for i in ids])
    px = cur.features.keypoints[kp_idx]
    try:
        sol = solve_pnp_ransac(pts, px, k, cfg.ransac(cur.id), cfg.optimizer())
    except (NoConsensus, InsufficientCorrespondences, DivergedOptimization) as e:
        raise TrackingLost(f"frame {cur.id}: {e}") from e
    cur.matches_to_map[:] = NO_MATCH
    cur.matches_to_map[kp_idx[sol.inlier_flags]] = ids[sol.inlier_flags]
    cur.pose = sol.pose
    return sol


def track_previous_frame(prev: Frame, cur: Frame, world: WorldMap, k: Intrinsics,
                         cfg: TrackerConfig, matcher: Matcher) -> PoseSolution:
    """Direct matching of the full previous and current feature sets."""
    if len(cur) == 0 or len(prev) == 0:
        raise TrackingLost(f"frame {cur.id}: no features")
    m = matcher.match(prev.features, cur.features)
    ids = prev.matches_to_map[m.pairs[:, 0]]
    has = ids != NO_MATCH
    return _solve(world, ids[has], cur, m.pairs[has, 1], k, cfg)


def track_with_motion_model(prev: Frame, cur: Frame, world: WorldMap, predicted: Pose,
                            k: Intrinsics, cfg: TrackerConfig) -> PoseSolution:
    """Baseline association: project the previous frame's map points under the
    predicted pose and search a window around each projection."""
    if len(cur) == 0:
        raise TrackingLost(f"frame {cur.id}: no features")
    ids = np.unique(prev.tracked_ids())
    if ids.size == 0:
        raise TrackingLost(f"frame {cur.id}: previous frame tracks no map points")
    pts = np.array([world.map_points[int(i)].position for i in ids])
    desc = np.array([world.map_points[int(i)].descriptor for i in ids])
    T_cw = inverse(predicted)
    pc = pts @ T_cw.R.T + T_cw.translation
    front = pc[:, 2] > 0
    ids, pc, desc = ids[front], pc[front], desc[front]
    uv = np.stack([k.fx * pc[:, 0] / pc[:, 2] + k.cx, k.fy * pc[:, 1] / pc[:, 2] + k.cy], axis=1)
    m = window_match(uv, desc, cur.features, cfg.baseline_window_px, cfg.baseline_ratio)
    return _solve(world, ids[m.pairs[:, 0]], cur, m.pairs[:, 1], k, cfg)


def track_local_map(world: WorldMap, cur: Frame, pose_estimate: Pose, k: Intrinsics,
                    cfg: TrackerConfig, matcher: Matcher) -> PoseSolution:
    """Match visible, not yet associated map points into the current frame and
    refine the pose on the union of old and new associations."""
    vis_ids, uv, desc = world.visible(pose_estimate, k)
    have = cur.matches_to_map != NO_MATCH
    n_have = int(np.count_nonzero(have))
    if len(vis_ids) == 0:
        if n_have < cfg.min_inliers_pose:
            raise TrackingLost(f"frame {cur.id}: {n_have} inliers, need {cfg.min_inliers_pose}")
        return PoseSolution(pose_estimate, have.copy(), float("nan"), [], 0)
    new = ~np.isin(vis_ids, cur.matches_to_map[have])
    free = np.nonzero(~have)[0]
    assoc = cur.matches_to_map.copy()
    if new.any() and free.size:
        m = matcher.match_with_prior(uv[new], desc[new], cur.features.subset(free))
        assoc[free[m.pairs[:, 1]]] = vis_ids[new][m.pairs[:, 0]]
    kp_idx = np.nonzero(assoc != NO_MATCH)[0]
    ids = assoc[kp_idx]
    if len(ids) < cfg.min_inliers_pose:
        raise TrackingLost(f"frame {cur.id}: {len(ids)} associations, need {cfg.min_inliers_pose}")
    pts = np.array([world.map_points[int(i)].position for i in ids])
    try:
        sol = optimize_pose(pose_estimate, pts, cur.features.keypoints[kp_idx], k, cfg.optimizer())
    except (InsufficientCorrespondences, DivergedOptimization) as e:
        raise TrackingLost(f"frame {cur.id}: {e}") from e
    if sol.n_inliers < cfg.min_inliers_pose:
        raise TrackingLost(f"frame {cur.id}: {sol.n_inliers} inliers, need {cfg.min_inliers_pose}")
    cur.matches_to_map[:] = NO_MATCH
    cur.matches_to_map[kp_idx[sol.inlier_flags]] = ids[sol.inlier_flags]
    cur.pose = sol.pose
    return sol


def need_new_keyframe(frames_since_last: int, cur: Frame, ref: KeyFrame,
                      cfg: TrackerConfig) -> bool:
    """Max-interval rule, or min-interval reached and tracking below the ratio."""
    if frames_since_last >= cfg.keyframe_max_interval:
        return True
    if frames_since_last < cfg.keyframe_min_interval:
        return False
    return _ratio(cur, ref) < cfg.tracked_ratio_threshold


def _ratio(cur, ref):
    try:
        return tracked_ratio(cur, ref)
    except EmptyReference:
        return 0.0


# --------------------------------------------------------------------------- sequence


@dataclass
class Tracker:
    k: Intrinsics
    cfg: TrackerConfig
    extractor: Extractor
    matcher: Matcher
    world: Optional[WorldMap] = None
    prev: Optional[Frame] = None
    prev_prev_pose: Optional[Pose] = None
    last_keyframe_frame: int = 0
    consecutive_lost: int = 0
    init_attempts: int = 0
    results: list = field(default_factory=list)

    @property
    def lost(self):
        return self.consecutive_lost >= self.cfg.lost_patience

    def make_frame(self, sf) -> Frame:
        fs = self.extractor.extract_frame(sf)
        depths = self.extractor.keypoint_depths(sf, fs)
        return Frame(sf.index, sf.timestamp, fs, depths)

    def process(self, sf) -> TrackResult:
        cur = self.make_frame(sf)
        if self.world is None:
            return self._initialize(cur)
        return self._track(cur)

    def _initialize(self, cur):
        self.init_attempts += 1
        try:
            self.world = initialize(cur, self.k, self.cfg)
        except InsufficientDepthFeatures as e:
            log.info("initialization: %s", e)
            if self.init_attempts >= self.cfg.lost_patience:
                raise InitializationFailed(
                    f"no initializable frame in the first {self.init_attempts}") from e
            r = TrackResult(cur.id, cur.timestamp, "lost")
            self.results.append(r)
            return r
        self.prev, self.last_keyframe_frame = cur, cur.id
        r = TrackResult(cur.id, cur.timestamp, "initialized", cur.pose,
                        keyframe_inserted=True, reference_keyframe=0,
                        map_points=len(self.world.map_points))
        self.results.append(r)
        return r

    def _associate(self, prev, cur, predicted):
        if self.cfg.mode == "selm":
            return track_previous_frame(prev, cur, self.world, self.k, self.cfg, self.matcher)
        return track_with_motion_model(prev, cur, self.world, predicted, self.k, self.cfg)

    def _track(self, cur):
        cfg, world = self.cfg, self.world
        prev_pose = self.prev.pose
        predicted = (predict_pose_constant_velocity(prev_pose, self.prev_prev_pose)
                     if self.prev_prev_pose is not None else prev_pose)
        retried = False
        try:
            try:
                sol = self._associate(self.prev, cur, predicted)
            except TrackingLost as e:
                ref = world.reference
                if ref.frame.id == self.prev.id:
                    raise
                log.info("%s; retrying against keyframe %d", e, ref.id)
                retried = True
                sol = self._associate(ref.frame, cur, predicted)
            matches_prev = sol.n_inliers
            sol = track_local_map(world, cur, sol.pose, self.k, cfg, self.matcher)
        except TrackingLost as e:
            log.info("lost: %s", e)
            self.consecutive_lost += 1
            r = TrackResult(cur.id, cur.timestamp, "lost", retried=retried,
                            reference_keyframe=world.reference_keyframe,
                            frames_since_keyframe=cur.id - self.last_keyframe_frame,
                            map_points=len(world.map_points))
            self.results.append(r)
            return r

        self.consecutive_lost = 0
        world.add_observations(cur.tracked_ids())
        ref = world.reference
        since = cur.id - self.last_keyframe_frame
        ratio = _ratio(cur, ref)
        insert = need_new_keyframe(since, cur, ref, cfg)
        r = TrackResult(cur.id, cur.timestamp, "ok", cur.pose, matches_prev,
                        int(np.count_nonzero(cur.matches_to_map != NO_MATCH)), insert, ratio,
                        since, ref.id, retried)
        if insert:
            kf = world.add_keyframe(cur)
            create_map_points(world, kf, self.k)
            cur.matches_to_map = kf.frame.matches_to_map.copy()
            self.last_keyframe_frame = cur.id
        r.map_points = len(world.map_points)
        self.prev_prev_pose, self.prev = prev_pose, cur
        self.results.append(r)
        return r

    def run(self, stream: Iterable):
        for sf in stream:
            self.process(sf)
            if self.lost:
                log.warning("tracking lost for %d consecutive frames, stopping",
                            self.consecutive_lost)
                break
        if not self.results:
            raise InitializationFailed("empty frame stream")
        return self.trajectory(), self.results

    def trajectory(self):
        return [(r.timestamp, r.pose) for r in self.results if r.status in ("ok", "initialized")]


def track_sequence(stream, k: Intrinsics, cfg: TrackerConfig, extractor: Extractor,
                   matcher: Matcher):
    """Run the tracker over a frame stream: (trajectory, telemetry)."""
    return Tracker(k, cfg, extractor, matcher).run(stream)
