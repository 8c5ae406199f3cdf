"""SE(3) poses, the pinhole camera model and TartanAir frame conventions.

Poses store a unit quaternion ``(w, x, y, z)`` and a translation in meters.
``compose(a, b)`` applies ``b`` first, then ``a``, so with world-from-camera
poses ``compose(T_wc, p_c)`` style chaining reads right to left exactly like
4x4 matrix products.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyTrajectory, NonPositiveDepth


def quat_multiply(q1, q2):
    """Hamilton product of two (w, x, y, z) quaternions."""
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """Rotation matrix -> unit quaternion (w, x, y, z) with w >= 0.

    Uses the largest-diagonal branch to stay well conditioned near 180 degrees.
    """
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def skew(v):
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def so3_exp(omega):
    """Rodrigues formula: axis-angle vector -> rotation matrix."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < 1e-8:
        # second-order Taylor expansion
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + np.sin(theta) / theta * K
            + (1 - np.cos(theta)) / theta ** 2 * K @ K)


@dataclass(frozen=True)
class Pose:
    """Rigid transform. ``rotation`` is a unit quaternion (w, x, y, z)."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise ValueError("rotation quaternion must be finite and non-zero")
        q = q / n
        if q[0] < 0:
            q = -q
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R, t):
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_xyzw(cls, t, q_xyzw):
        """Build from TUM-ordered fields (translation, quaternion x, y, z, w)."""
        x, y, z, w = q_xyzw
        return cls(np.array([w, x, y, z]), t)

    @property
    def R(self):
        return quat_to_matrix(self.rotation)

    @property
    def t(self):
        return self.translation

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def quat_xyzw(self):
        w, x, y, z = self.rotation
        return np.array([x, y, z, w])

    def apply(self, points):
        """Transform a 3-vector or an (N, 3) array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.R.T + self.translation

    def __matmul__(self, other):
        return compose(self, other)

    def inverse(self):
        return inverse(self)

    def __repr__(self):
        q = np.array2string(self.rotation, precision=6)
        t = np.array2string(self.translation, precision=6)
        return f"Pose(q={q}, t={t})"


def compose(a: Pose, b: Pose) -> Pose:
    """Pose that applies ``b`` then ``a``."""
    q = quat_multiply(a.rotation, b.rotation)
    t = a.R @ b.translation + a.translation
    return Pose(q, t)


def inverse(p: Pose) -> Pose:
    w, x, y, z = p.rotation
    q_inv = np.array([w, -x, -y, -z])
    return Pose(q_inv, -(quat_to_matrix(q_inv) @ p.translation))


def rotation_angle(p: Pose) -> float:
    """Rotation magnitude of a pose in radians."""
    w = min(1.0, abs(float(p.rotation[0])))
    v = np.linalg.norm(p.rotation[1:])
    return 2.0 * float(np.arctan2(v, w))


def pose_distance(a: Pose, b: Pose):
    """(rotation angle, translation norm) of ``inverse(a) @ b``."""
    d = compose(inverse(a), b)
    return rotation_angle(d), float(np.linalg.norm(d.translation))


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_factor: float = 5000.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if not self.depth_factor > 0:
            raise ValueError("depth_factor must be positive")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def in_bounds(self, uv):
        uv = np.atleast_2d(uv)
        return ((uv[:, 0] >= 0) & (uv[:, 0] <= self.width - 1)
                & (uv[:, 1] >= 0) & (uv[:, 1] <= self.height - 1))

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "depth_factor": self.depth_factor}


# Freiburg-1 calibration from the TUM RGB-D benchmark.
TUM_FR1 = Intrinsics(517.3, 516.5, 318.6, 255.3, 640, 480, 5000.0)
# ICL-NUIM (TUM-compatible export; the native -480 fy is flipped at export).
ICL_NUIM = Intrinsics(481.20, 480.0, 319.5, 239.5, 640, 480, 5000.0)
# TartanAir: 640x480, fov 90 degrees.
TARTANAIR = Intrinsics(320.0, 320.0, 320.0, 240.0, 640, 480, 5000.0)


def project(point_cam, k: Intrinsics):
    """Pinhole projection of a camera-frame point, or (N, 3) points.

    Returns ``(u, v)`` as an array of shape (2,) or (N, 2).
    """
    p = np.asarray(point_cam, dtype=float)
    z = p[..., 2]
    if np.any(z <= 0):
        raise NonPositiveDepth("point has non-positive depth")
    u = k.fx * p[..., 0] / z + k.cx
    v = k.fy * p[..., 1] / z + k.cy
    return np.stack([u, v], axis=-1)


def backproject(px, depth, k: Intrinsics):
    """Inverse of :func:`project` for a pixel (or (N, 2) pixels) at metric depth."""
    px = np.asarray(px, dtype=float)
    d = np.asarray(depth, dtype=float)
    if np.any(d <= 0):
        raise NonPositiveDepth("depth must be positive")
    x = (px[..., 0] - k.cx) * d / k.fx
    y = (px[..., 1] - k.cy) * d / k.fy
    return np.stack([x, y, np.broadcast_to(d, x.shape)], axis=-1)


# cam = NED_TO_CAM @ ned: camera x = NED y (right), y = NED z (down), z = NED x (forward)
NED_TO_CAM = np.array([[0.0, 1.0, 0.0],
                       [0.0, 0.0, 1.0],
                       [1.0, 0.0, 0.0]])
_NED_TO_CAM_POSE = Pose.from_rt(NED_TO_CAM, np.zeros(3))


def ned_to_camera(pose_ned: Pose) -> Pose:
    """Re-express a TartanAir NED pose in the z-forward camera convention.

    Both the world axes and the body axes are permuted, i.e. the pose is
    conjugated by the axis permutation, so identity stays identity.
    """
    return compose(compose(_NED_TO_CAM_POSE, pose_ned), inverse(_NED_TO_CAM_POSE))


def rebase_trajectory(poses):
    """Express every pose relative to the first one (first becomes identity)."""
    poses = list(poses)
    if not poses:
        raise EmptyTrajectory("cannot rebase an empty trajectory")
    first_inv = inverse(poses[0])
    out = [compose(first_inv, p) for p in poses]
    out[0] = Pose.identity()
    return out
