"""Camera pose from 3D-2D correspondences.

Poses passed in and out are world-from-camera. Internally the optimizer
works on camera-from-world ``T_cw`` with a left-multiplied increment
``(rho, phi)``: ``R_cw <- exp(phi) R_cw``, ``t_cw <- exp(phi) t_cw + rho``.
Residuals are ``projected - observed`` in pixels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import cv2
import numpy as np

from .errors import DivergedOptimization, InsufficientCorrespondences, NoConsensus, PointBehindCamera
from .geometry import Intrinsics, Pose, inverse, project, so3_exp

log = logging.getLogger(__name__)

SAMPLE_SIZE = 4
MIN_DEPTH = 1e-6


@dataclass
class PoseSolution:
    pose: Pose
    inlier_flags: np.ndarray
    mean_reprojection_error: float
    cost_history: list = field(default_factory=list)
    iterations: int = 0

    @property
    def n_inliers(self):
        return int(np.count_nonzero(self.inlier_flags))


@dataclass
class RansacConfig:
    iterations: int = 300
    inlier_threshold_px: float = 3.0
    minimum_inliers: int = 15
    seed: int = 0
    confidence: float = 0.999


@dataclass
class OptimizerConfig:
    max_iterations: int = 30
    huber_delta_px: float = 2.0
    convergence_tol: float = 1e-12


def _camera_points(pose_wc: Pose, world):
    T_cw = inverse(pose_wc)
    return np.asarray(world, dtype=np.float64) @ T_cw.R.T + T_cw.translation


def reprojection_residual(pose: Pose, world_point, pixel, k: Intrinsics):
    """``project(inverse(pose) * world_point) - pixel`` for one correspondence."""
    pc = _camera_points(pose, np.asarray(world_point, dtype=np.float64).reshape(1, 3))[0]
    if pc[2] <= 0:
        raise PointBehindCamera("world point is behind the camera")
    return project(pc, k) - np.asarray(pixel, dtype=np.float64)


def reprojection_residuals(pose: Pose, world, pixels, k: Intrinsics):
    """Vectorized residuals (N, 2) and a mask of points in front of the camera."""
    pc = _camera_points(pose, world)
    front = pc[:, 2] > MIN_DEPTH
    z = np.where(front, pc[:, 2], 1.0)
    uv = np.stack([k.fx * pc[:, 0] / z + k.cx, k.fy * pc[:, 1] / z + k.cy], axis=1)
    return uv - np.asarray(pixels, dtype=np.float64), front


def reprojection_jacobian(pose: Pose, world, k: Intrinsics):
    """d residual / d (rho, phi) for the left increment on ``T_cw``: (N, 2, 6)."""
    pc = _camera_points(pose, world)
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    zi = 1.0 / z
    n = len(pc)
    Jp = np.zeros((n, 2, 3))
    Jp[:, 0, 0] = k.fx * zi
    Jp[:, 0, 2] = -k.fx * x * zi * zi
    Jp[:, 1, 1] = k.fy * zi
    Jp[:, 1, 2] = -k.fy * y * zi * zi
    # d pc / d phi = -[pc]_x
    neg_skew = np.zeros((n, 3, 3))
    neg_skew[:, 0, 1], neg_skew[:, 0, 2] = z, -y
    neg_skew[:, 1, 0], neg_skew[:, 1, 2] = -z, x
    neg_skew[:, 2, 0], neg_skew[:, 2, 1] = y, -x
    J = np.empty((n, 2, 6))
    J[:, :, :3] = Jp
    J[:, :, 3:] = Jp @ neg_skew
    return J


def apply_increment(pose: Pose, delta) -> Pose:
    """World-from-camera pose after the left increment ``delta`` on ``T_cw``."""
    delta = np.asarray(delta, dtype=np.float64)
    T_cw = inverse(pose)
    dR = so3_exp(delta[3:])
    R = dR @ T_cw.R
    t = dR @ T_cw.translation + delta[:3]
    return inverse(Pose.from_rt(R, t))


def huber_weights(err, delta):
    return np.where(err <= delta, 1.0, delta / np.maximum(err, 1e-300))


def robust_cost(pose: Pose, world, pixels, k: Intrinsics, huber_delta_px):
    """Sum of Huber-robustified squared reprojection errors.

    ``rho(e) = e^2`` for ``e <= delta`` and ``2 delta e - delta^2`` beyond.
    Points behind the camera are skipped.
    """
    r, front = reprojection_residuals(pose, world, pixels, k)
    e = np.linalg.norm(r[front], axis=1)
    d = huber_delta_px
    return float(np.sum(np.where(e <= d, e * e, 2 * d * e - d * d)))


def cost_gradient(pose: Pose, world, pixels, k: Intrinsics, huber_delta_px):
    """Analytic gradient of :func:`robust_cost` w.r.t. the tangent increment."""
    r, front = reprojection_residuals(pose, world, pixels, k)
    J = reprojection_jacobian(pose, np.asarray(world)[front], k)
    r = r[front]
    w = huber_weights(np.linalg.norm(r, axis=1), huber_delta_px)
    return 2.0 * np.einsum("n,nij,ni->j", w, J, r)


def optimize_pose(initial: Pose, world, pixels, k: Intrinsics, cfg: OptimizerConfig = None,
                  **overrides) -> PoseSolution:
    """Levenberg-Marquardt on the Huber cost over the 6-dof tangent space.

    Accepted iterations never increase the robust cost; ``cost_history``
    records the cost at the start and after every accepted step.
    """
    cfg = cfg or OptimizerConfig(**overrides)
    world = np.asarray(world, dtype=np.float64).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if len(world) < 4:
        raise InsufficientCorrespondences(f"{len(world)} correspondences, need 4")
    _, front = reprojection_residuals(initial, world, pixels, k)
    if front.sum() < 4:
        raise InsufficientCorrespondences("fewer than 4 points in front of the camera")

    delta_h = cfg.huber_delta_px
    pose = initial
    cost = robust_cost(pose, world, pixels, k, delta_h)
    if not np.isfinite(cost):
        raise DivergedOptimization("initial cost is not finite")
    history = [cost]
    lam = 1e-3
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        if cost <= 1e-30:
            break
        r, front = reprojection_residuals(pose, world, pixels, k)
        J = reprojection_jacobian(pose, world[front], k)
        r = r[front]
        w = huber_weights(np.linalg.norm(r, axis=1), delta_h)
        H = np.einsum("n,nij,nik->jk", w, J, J)
        g = np.einsum("n,nij,ni->j", w, J, r)
        if not np.all(np.isfinite(H)) or not np.all(np.isfinite(g)):
            raise DivergedOptimization("non-finite normal equations")
        improved = False
        while lam < 1e12:
            A = H + lam * np.diag(np.diag(H) + 1e-12)
            try:
                step = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = apply_increment(pose, step)
            c_new = robust_cost(cand, world, pixels, k, delta_h)
            if np.isfinite(c_new) and c_new <= cost:
                improved = True
                break
            lam *= 10
        if not improved:
            # even a vanishing gradient step fails: stationary to working precision
            break
        rel = (cost - c_new) / max(cost, 1e-300)
        pose, cost = cand, c_new
        history.append(cost)
        lam = max(lam / 10, 1e-9)
        if rel < cfg.convergence_tol or np.linalg.norm(step) < 1e-14:
            break

    r, front = reprojection_residuals(pose, world, pixels, k)
    err = np.linalg.norm(r, axis=1)
    inliers = front & (err <= 2.0 * delta_h)
    mean_err = float(err[inliers].mean()) if inliers.any() else float("inf")
    return PoseSolution(pose, inliers, mean_err, history, it)


def _minimal_solve(world4, pixels4, K):
    try:
        ok, rvec, tvec = cv2.solvePnP(world4, pixels4, K, None, flags=cv2.SOLVEPNP_AP3P)
    except cv2.error:
        return None
    if not ok or not np.all(np.isfinite(rvec)) or not np.all(np.isfinite(tvec)):
        return None
    R, _ = cv2.Rodrigues(rvec)
    return inverse(Pose.from_rt(R, tvec.reshape(3)))


def _inliers(pose, world, pixels, k, thr):
    r, front = reprojection_residuals(pose, world, pixels, k)
    err = np.linalg.norm(r, axis=1)
    return front & (err <= thr), np.where(front, np.minimum(err, thr), thr)


def solve_pnp_ransac(world, pixels, k: Intrinsics, cfg: RansacConfig = None,
                     optimizer: OptimizerConfig = None, **overrides) -> PoseSolution:
    """Robust PnP: seeded 4-point RANSAC, then Huber refinement on the inliers.

    Hypotheses are ranked by inlier count, ties by the truncated error sum,
    then by sampling order, so a fixed seed gives a fixed answer.
    """
    cfg = cfg or RansacConfig(**overrides)
    optimizer = optimizer or OptimizerConfig()
    world = np.asarray(world, dtype=np.float64).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n = len(world)
    if n < SAMPLE_SIZE:
        raise InsufficientCorrespondences(f"{n} correspondences, need {SAMPLE_SIZE}")
    rng = np.random.default_rng(cfg.seed)
    K = k.K
    thr = cfg.inlier_threshold_px
    best = None  # (count, -truncated_sum, pose, mask)
    needed = cfg.iterations
    i = 0
    while i < min(cfg.iterations, needed):
        i += 1
        idx = rng.choice(n, SAMPLE_SIZE, replace=False)
        pose = _minimal_solve(world[idx], pixels[idx], K)
        if pose is None:
            continue
        mask, trunc = _inliers(pose, world, pixels, k, thr)
        key = (int(mask.sum()), -float(trunc.sum()))
        if best is None or key > best[0]:
            best = (key, pose, mask)
            ratio = key[0] / n
            if ratio >= 1.0:
                needed = i
            elif ratio > 0:
                needed = int(np.ceil(np.log(1 - cfg.confidence)
                                     / np.log(1 - ratio ** SAMPLE_SIZE)))
    if best is None or best[0][0] < max(cfg.minimum_inliers, SAMPLE_SIZE):
        raise NoConsensus(0 if best is None else best[0][0], cfg.minimum_inliers)

    pose, mask = best[1], best[2]
    for _ in range(2):
        sol = optimize_pose(pose, world[mask], pixels[mask], k, optimizer)
        pose = sol.pose
        new_mask, _ = _inliers(pose, world, pixels, k, thr)
        if np.array_equal(new_mask, mask) or new_mask.sum() < SAMPLE_SIZE:
            break
        mask = new_mask
    mask, _ = _inliers(pose, world, pixels, k, thr)
    if mask.sum() < cfg.minimum_inliers:
        raise NoConsensus(int(mask.sum()), cfg.minimum_inliers)
    r, _ = reprojection_residuals(pose, world, pixels, k)
    mean_err = float(np.linalg.norm(r[mask], axis=1).mean())
    return PoseSolution(pose, mask, mean_err, sol.cost_history, i)
