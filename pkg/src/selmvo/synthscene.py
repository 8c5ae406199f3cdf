"""Seeded synthetic RGB-D scenes used as ground-truth oracles.

Two kinds of scene live here:

* landmark scenes (:func:`make_orbit_scene`), whose observations bypass the
  image entirely and reach the tracker through :class:`SyntheticExtractor`;
* a textured-plane renderer (:func:`render_plane_sequence`) that produces
  real images for the builtin detector, plus writers that lay those frames
  out as TUM or TartanAir directories.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import cv2
import numpy as np

from .dataset import SequenceFrame, write_tum_sequence
from .frontend import DESCRIPTOR_DIM, Extractor, FeatureSet
from .geometry import NED_TO_CAM, Intrinsics, Pose, compose, inverse, project, so3_exp

SYNTH_K = Intrinsics(525.0, 525.0, 319.5, 239.5, 640, 480, 5000.0)
FPS = 30.0


@dataclass
class NoiseModel:
    pixel_sigma: float = 0.0
    depth_sigma: float = 0.0
    outlier_rate: float = 0.0


@dataclass
class SyntheticScene:
    landmarks: np.ndarray  # (N, 3) world meters
    descriptors: np.ndarray  # (N, D) unit rows
    trajectory: list  # world-from-camera Poses
    intrinsics: Intrinsics = SYNTH_K
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int = 0
    min_visible: int = 0

    def __len__(self):
        return len(self.trajectory)

    def timestamp(self, i):
        return i / FPS

    def ground_truth(self):
        return [(self.timestamp(i), p) for i, p in enumerate(self.trajectory)]

    def visible(self, i, z_min=0.05):
        """Indices of landmarks in front of camera ``i`` and inside the image, plus uv and depth."""
        T_cw = inverse(self.trajectory[i])
        pc = self.landmarks @ T_cw.R.T + T_cw.translation
        front = pc[:, 2] > z_min
        idx = np.nonzero(front)[0]
        uv = project(pc[idx], self.intrinsics)
        inside = self.intrinsics.in_bounds(uv)
        return idx[inside], uv[inside], pc[idx[inside], 2]

    def frames(self):
        for i in range(len(self)):
            yield render_frame(self, i)[0]


@dataclass
class RenderedFrame:
    """Observations of one frame: the association table is one-to-one."""

    features: FeatureSet
    depths: np.ndarray
    landmark_ids: np.ndarray  # landmark whose pixel each keypoint is
    outlier: np.ndarray  # keypoint carries another landmark's descriptor


def _look_at(center, target, down=(0.0, 1.0, 0.0)):
    z = np.asarray(target, float) - center
    z /= np.linalg.norm(z)
    y = np.asarray(down, float) - np.dot(down, z) * z
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    return Pose.from_rt(np.column_stack([x, y, z]), center)


def unit_rows(rng, n, dim=DESCRIPTOR_DIM):
    d = rng.normal(size=(n, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def make_orbit_scene(radius=1.0, frames=100, landmark_count=600, seed=0,
                     noise: Optional[NoiseModel] = None, k: Intrinsics = SYNTH_K,
                     cloud_radius=None, min_visible=50) -> SyntheticScene:
    """Camera on a full horizontal circle around a landmark ball, always
    looking at its center (the world origin). World y points down, like the
    camera's, so the first pose has the camera at ``(radius, 0, 0)``.
    """
    if radius <= 0 or frames < 2:
        raise ValueError("need radius > 0 and frames >= 2")
    rng = np.random.default_rng(seed)
    cloud_radius = 0.5 * radius if cloud_radius is None else cloud_radius
    # uniform in a ball
    dirs = rng.normal(size=(landmark_count, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pts = dirs * cloud_radius * rng.uniform(0, 1, (landmark_count, 1)) ** (1 / 3)
    theta = 2 * np.pi * np.arange(frames) / frames
    traj = [_look_at(np.array([radius * np.cos(a), 0.0, radius * np.sin(a)]), np.zeros(3))
            for a in theta]
    scene = SyntheticScene(pts, unit_rows(rng, landmark_count), traj, k,
                           noise or NoiseModel(), seed, min_visible)
    short = [i for i in range(frames) if len(scene.visible(i)[0]) < min_visible]
    if short:
        raise ValueError(f"frames {short[:5]} see fewer than {min_visible} landmarks")
    return scene


def render_frame(scene: SyntheticScene, i: int):
    """Observations of frame ``i`` as (SequenceFrame, RenderedFrame).

    Noise is seeded by ``(scene.seed, i)`` so any frame can be rendered on
    its own. Outliers keep their pixel and depth but trade descriptors in a
    cycle, so each one carries the descriptor of another visible landmark.
    """
    if not 0 <= i < len(scene):
        raise IndexError(i)
    k = scene.intrinsics
    rng = np.random.default_rng([scene.seed, i])
    idx, uv, z = scene.visible(i)
    n = len(idx)
    nz = scene.noise
    if nz.pixel_sigma > 0:
        uv = uv + rng.normal(0, nz.pixel_sigma, uv.shape)
        uv[:, 0] = np.clip(uv[:, 0], 0, k.width - 1)
        uv[:, 1] = np.clip(uv[:, 1], 0, k.height - 1)
    if nz.depth_sigma > 0:
        z = np.maximum(z + rng.normal(0, nz.depth_sigma, n), 1e-3)
    desc = scene.descriptors[idx].copy()
    outlier = np.zeros(n, bool)
    n_out = int(round(nz.outlier_rate * n))
    if n_out >= 2:
        o = np.sort(rng.choice(n, n_out, replace=False))
        desc[o] = scene.descriptors[idx[np.roll(o, 1)]]
        outlier[o] = True
    fs = FeatureSet(uv, np.ones(n), desc, (k.width, k.height))
    rendered = RenderedFrame(fs, z, idx, outlier)

    depth = np.zeros((k.height, k.width))
    px = np.floor(uv + 0.5).astype(int)
    depth[px[:, 1], px[:, 0]] = z
    rgb = np.zeros((k.height, k.width, 3), np.uint8)
    frame = SequenceFrame(scene.timestamp(i), rgb, depth, scene.trajectory[i], index=i)
    return frame, rendered


class SyntheticExtractor(Extractor):
    """Injected extractor returning a scene's observations for each frame.

    Frames are identified by ``SequenceFrame.index``; depths are the exact
    (or noisy) observation depths rather than a pixel lookup.
    """

    name = "synthetic"

    def __init__(self, scene: SyntheticScene):
        self.scene = scene
        self._last = None

    def _render(self, frame):
        if self._last is None or self._last[0] != frame.index:
            self._last = (frame.index, render_frame(self.scene, frame.index)[1])
        return self._last[1]

    def extract(self, image):
        raise NotImplementedError("synthetic observations need the frame, use extract_frame")

    def extract_frame(self, frame):
        return self._render(frame).features

    def keypoint_depths(self, frame, fs):
        return self._render(frame).depths.copy()


# --------------------------------------------------------------------------- image scenes


def make_texture(seed, size=1024, cell=12):
    """Random blocky grayscale texture with strong corners."""
    rng = np.random.default_rng(seed)
    n = size // cell + 1
    blocks = rng.integers(20, 236, (n, n)).astype(np.uint8)
    tex = np.kron(blocks, np.ones((cell, cell), np.uint8))[:size, :size]
    return cv2.GaussianBlur(tex, (3, 3), 0.6)


def render_plane(pose: Pose, k: Intrinsics, texture, plane_z=2.0, texel=0.004):
    """Image and depth of the textured plane ``z = plane_z`` (world) from ``pose``.

    The texture is centred on the world z axis with ``texel`` meters per
    texture pixel and repeats beyond its edges.
    """
    v, u = np.mgrid[0:k.height, 0:k.width].astype(np.float64)
    rays = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
    dw = rays @ pose.R.T
    o = pose.translation
    s = (plane_z - o[2]) / dw[..., 2]
    if np.any(s <= 0):
        raise ValueError("plane is not in front of the camera everywhere")
    xw = o[0] + s * dw[..., 0]
    yw = o[1] + s * dw[..., 1]
    size = texture.shape[0]
    mx = np.mod(xw / texel + size / 2, size).astype(np.float32)
    my = np.mod(yw / texel + size / 2, size).astype(np.float32)
    gray = cv2.remap(texture, mx, my, cv2.INTER_LINEAR, borderMode=cv2.BORDER_WRAP)
    depth = s  # the ray has unit z in the camera frame, so s is camera depth
    return np.repeat(gray[..., None], 3, axis=2), depth


def plane_trajectory(frames, step=0.004, yaw_deg=0.1, seed=0):
    """Slow curved sideways drift with a slight yaw, starting at the identity."""
    rng = np.random.default_rng(seed)
    direction = np.array([1.0, 0.3, 0.0]) + rng.normal(0, 0.05, 3)
    direction[2] = 0.0
    direction /= np.linalg.norm(direction)
    bend = np.array([-direction[1], direction[0], 0.5])
    poses = []
    for i in range(frames):
        R = so3_exp(np.deg2rad(yaw_deg * i) * np.array([0.0, 1.0, 0.0]))
        t = direction * step * i + bend * step * np.sin(0.5 * i)
        poses.append(Pose.from_rt(R, t))
    return poses


def render_plane_sequence(frames=10, k: Intrinsics = SYNTH_K, seed=0, plane_z=2.0, **traj_kw):
    """SequenceFrames (with ground truth) of a camera drifting over a textured plane."""
    tex = make_texture(seed)
    out = []
    for i, pose in enumerate(plane_trajectory(frames, seed=seed, **traj_kw)):
        rgb, depth = render_plane(pose, k, tex, plane_z)
        out.append(SequenceFrame(i / FPS, rgb, depth, pose, index=i))
    return out


def write_tum_fixture(out_path, frames, depth_factor=5000.0):
    return write_tum_sequence(out_path, frames, depth_factor, header="synthetic")


def camera_to_ned(pose_cam: Pose) -> Pose:
    """Inverse of :func:`selmvo.geometry.ned_to_camera`."""
    P = Pose.from_rt(NED_TO_CAM, np.zeros(3))
    return compose(compose(inverse(P), pose_cam), P)


def write_tartanair_fixture(out_path, frames, origin: Pose = None, camera="left"):
    """Lay frames out like a TartanAir trajectory folder.

    Poses are written in NED as ``tx ty tz qx qy qz qw`` after moving the
    whole trajectory by ``origin`` (so it does not start at the identity),
    depth as float32 ``.npy`` in meters.
    """
    out = Path(out_path)
    img_dir, dep_dir = out / f"image_{camera}", out / f"depth_{camera}"
    img_dir.mkdir(parents=True, exist_ok=True)
    dep_dir.mkdir(parents=True, exist_ok=True)
    origin = origin or Pose.identity()
    lines = []
    for i, f in enumerate(frames):
        cv2.imwrite(str(img_dir / f"{i:06d}_{camera}.png"), cv2.cvtColor(f.rgb, cv2.COLOR_RGB2BGR))
        np.save(dep_dir / f"{i:06d}_{camera}_depth.npy", f.depth.astype(np.float32))
        p = camera_to_ned(compose(origin, f.ground_truth))
        vals = list(p.translation) + list(p.quat_xyzw())
        lines.append(" ".join(f"{v:.10e}" for v in vals))
    (out / f"pose_{camera}.txt").write_text("\n".join(lines) + "\n")
    return out
