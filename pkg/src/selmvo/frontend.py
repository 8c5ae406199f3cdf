"""Feature extraction: grayscale conversion, the builtin grid detector and the
extractor interface shared with the learned (ONNX) path.

The builtin detector mimics the classical ORB-SLAM style front end: an image
pyramid, a fixed grid of cells per level, and a per-cell fallback to a lower
corner threshold when a cell comes up short. Its descriptor is a plain
normalized intensity patch, sized to match the 256-d learned descriptors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import cv2
import numpy as np
from scipy.ndimage import maximum_filter, uniform_filter

DESCRIPTOR_DIM = 256
PATCH = 16
BORDER = PATCH // 2

# 16-pixel Bresenham circle of radius 3, clockwise from the top
RING = np.array([
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
])
ARC = 9
# saddle response must exceed SADDLE_GAIN * threshold
SADDLE_GAIN = 4.0


@dataclass
class FeatureSet:
    """Keypoints (N, 2) as (u, v) pixels, scores (N,), descriptors (N, D)."""

    keypoints: np.ndarray
    scores: np.ndarray
    descriptors: np.ndarray
    image_size: tuple  # (width, height)

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        n = len(self.keypoints)
        d = np.asarray(self.descriptors, dtype=np.float64)
        self.descriptors = d.reshape(n, -1) if d.size else np.zeros((n, DESCRIPTOR_DIM))
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))

    def __len__(self):
        return len(self.keypoints)

    @property
    def dim(self):
        return self.descriptors.shape[1]

    @classmethod
    def empty(cls, image_size, dim=DESCRIPTOR_DIM):
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, dim)), image_size)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return FeatureSet(self.keypoints[idx], self.scores[idx], self.descriptors[idx],
                          self.image_size)

    def validate(self, tol=1e-4):
        """Raise ``ValueError`` if any FeatureSet invariant is broken."""
        n = len(self.keypoints)
        if len(self.scores) != n or len(self.descriptors) != n:
            raise ValueError("keypoints, scores and descriptors differ in length")
        if n == 0:
            return self
        if np.any(np.abs(np.linalg.norm(self.descriptors, axis=1) - 1) > tol):
            raise ValueError("descriptors are not unit norm")
        if np.any((self.scores < 0) | (self.scores > 1)):
            raise ValueError("scores outside [0, 1]")
        w, h = self.image_size
        u, v = self.keypoints[:, 0], self.keypoints[:, 1]
        if np.any((u < 0) | (u > w - 1) | (v < 0) | (v > h - 1)):
            raise ValueError("keypoint outside image bounds")
        return self


@dataclass
class ExtractorConfig:
    max_features: int = 1000
    score_threshold: float = 0.005  # learned path
    nms_radius: int = 4  # learned path
    grid_cells: tuple = (8, 8)  # (rows, cols)
    levels: int = 8
    scale_factor: float = 1.2
    fast_threshold: int = 20
    fallback_threshold: int = 7
    min_per_cell: int = 5

    def __post_init__(self):
        self.grid_cells = tuple(int(x) for x in self.grid_cells)
        if self.max_features <= 0:
            raise ValueError("max_features must be positive")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if not self.scale_factor > 1:
            raise ValueError("scale_factor must be > 1")
        if not 0 <= self.score_threshold <= 1:
            raise ValueError("score_threshold must be in [0, 1]")

    def as_dict(self):
        d = asdict(self)
        d["grid_cells"] = list(self.grid_cells)
        return d


def to_grayscale(rgb):
    """BT.601 luma of an 8-bit RGB image, rounded half up."""
    rgb = np.asarray(rgb)
    if rgb.ndim == 2:
        return rgb.astype(np.uint8)
    y = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.floor(y + 0.5).clip(0, 255).astype(np.uint8)


def normalize_keypoints(fs: FeatureSet):
    """Map pixel keypoints to [-1, 1] relative to the image center."""
    w, h = fs.image_size
    size = max(w, h)
    kp = fs.keypoints
    return np.stack([(2 * kp[:, 0] - w) / size, (2 * kp[:, 1] - h) / size], axis=1)


# --------------------------------------------------------------------------- detector


def _ring_stack(img):
    """Ring samples for every pixel at least 3 px from the border: (16, H-6, W-6)."""
    h, w = img.shape
    return np.stack([img[3 + dy:h - 3 + dy, 3 + dx:w - 3 + dx] for dx, dy in RING])


def _segment_test(ring, center, t):
    """FAST-9: 9 contiguous ring pixels all brighter or all darker by ``t``."""
    out = np.zeros(center.shape, dtype=bool)
    for mask in (ring > center + t, ring < center - t):
        ext = np.concatenate([mask, mask[:ARC - 1]])
        run = ext[0:16].copy()
        for k in range(1, ARC):
            run &= ext[k:k + 16]
        out |= run.any(axis=0)
    return out


def corner_response(img, thresholds):
    """Corner tests at each threshold in ``thresholds`` plus a shared score.

    A pixel passes at threshold ``t`` if the FAST-9 segment test holds on its
    radius-3 ring or if the ring shows a saddle (X-junction) pattern whose
    response exceeds ``SADDLE_GAIN * t``. Returns ``(masks, score)``: one
    boolean mask per threshold and a float score in [0, 1]; the 3 px border
    never passes.
    """
    f = img.astype(np.float32)
    h, w = f.shape
    masks = [np.zeros((h, w), dtype=bool) for _ in thresholds]
    score = np.zeros((h, w), dtype=np.float32)
    if h < 7 or w < 7:
        return masks, score
    ring = _ring_stack(f)
    c = f[3:h - 3, 3:w - 3]

    diff = ring - c
    fast_score = np.maximum(np.clip(diff, 0, None).sum(0), np.clip(-diff, 0, None).sum(0))

    # ChESS-style saddle response on the same ring
    sum_resp = sum(np.abs(ring[n] + ring[n + 8] - ring[n + 4] - ring[n + 12]) for n in range(4))
    diff_resp = sum(np.abs(ring[n] - ring[n + 8]) for n in range(8))
    local_mean = uniform_filter(f, size=3, mode="nearest")[3:h - 3, 3:w - 3]
    saddle = sum_resp - diff_resp - 16.0 * np.abs(ring.mean(0) - local_mean)

    # the score must not depend on t: use the loosest test to decide which response applies
    lowest = min(thresholds)
    fast_any = _segment_test(ring, c, lowest)
    s = np.where(fast_any, fast_score / (16 * 255.0), 0.0)
    s = np.maximum(s, np.where(saddle > SADDLE_GAIN * lowest, saddle / (8 * 255.0), 0.0))
    score[3:h - 3, 3:w - 3] = np.clip(s, 0.0, 1.0)
    for m, t in zip(masks, thresholds):
        fast_pass = fast_any if t == lowest else _segment_test(ring, c, t)
        m[3:h - 3, 3:w - 3] = fast_pass | (saddle > SADDLE_GAIN * t)
    return masks, score


def _nms(mask, score, radius=1):
    """Non-maximum suppression over candidate pixels.

    A candidate survives if no candidate within ``radius`` (Chebyshev) scores
    higher and no equal-scoring candidate precedes it in raster order.
    """
    masked = np.where(mask, score, -1.0).astype(np.float64)
    peak = mask & (masked >= maximum_filter(masked, size=2 * radius + 1, mode="constant",
                                            cval=-1.0))
    h, w = mask.shape
    pad = np.pad(np.where(peak, masked, -2.0), radius, constant_values=-3.0)
    suppressed = np.zeros_like(peak)
    for dy in range(-radius, 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx >= 0:
                break
            nb = pad[radius + dy:radius + dy + h, radius + dx:radius + dx + w]
            suppressed |= nb == masked
    vs, us = np.nonzero(peak & ~suppressed)
    return vs, us


def patch_descriptors(img, us, vs):
    """16x16 mean-subtracted, L2-normalized patches; rows of zeros if flat."""
    us = np.asarray(us, dtype=int)
    vs = np.asarray(vs, dtype=int)
    if us.size == 0:
        return np.zeros((0, DESCRIPTOR_DIM))
    f = img.astype(np.float64)
    dy, dx = np.mgrid[-BORDER:BORDER, -BORDER:BORDER]
    p = f[vs[:, None, None] + dy, us[:, None, None] + dx].reshape(len(us), -1)
    p = p - p.mean(axis=1, keepdims=True)
    n = np.linalg.norm(p, axis=1, keepdims=True)
    return np.where(n > 1e-9, p / np.where(n > 1e-9, n, 1.0), 0.0)


def _level_corners(img, cfg: ExtractorConfig):
    """Grid-bucketed corners of one pyramid level: (us, vs, scores)."""
    h, w = img.shape
    (strong, weak), score = corner_response(img, (cfg.fast_threshold, cfg.fallback_threshold))
    inner = np.zeros((h, w), dtype=bool)
    if h <= 2 * BORDER or w <= 2 * BORDER:
        return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
    inner[BORDER:h - BORDER, BORDER:w - BORDER] = True
    sv, su = _nms(strong & inner, score)
    wv, wu = _nms(weak & inner, score)

    rows, cols = cfg.grid_cells
    ys = np.linspace(BORDER, h - BORDER, rows + 1)
    xs = np.linspace(BORDER, w - BORDER, cols + 1)

    def cell_of(u, v):
        r = np.clip(np.searchsorted(ys, v, side="right") - 1, 0, rows - 1)
        c = np.clip(np.searchsorted(xs, u, side="right") - 1, 0, cols - 1)
        return r * cols + c

    s_cell = cell_of(su, sv)
    w_cell = cell_of(wu, wv)
    counts = np.bincount(s_cell, minlength=rows * cols)
    short = counts < cfg.min_per_cell
    keep_s = ~short[s_cell]
    keep_w = short[w_cell]
    us = np.concatenate([su[keep_s], wu[keep_w]])
    vs = np.concatenate([sv[keep_s], wv[keep_w]])
    return us, vs, score[vs, us].astype(np.float64)


def builtin_grid_detect(image, cfg: Optional[ExtractorConfig] = None) -> FeatureSet:
    """Multi-level, grid-bucketed corners with patch descriptors.

    Level ``l`` is the image downscaled by ``scale_factor**l``; its corners at
    level coordinates ``(u, v)`` are reported at ``(u, v) * scale_factor**l``.
    """
    cfg = cfg or ExtractorConfig()
    img = np.asarray(image)
    if img.ndim == 3:
        img = to_grayscale(img)
    h, w = img.shape
    levels, cands = [], []
    for level in range(cfg.levels):
        scale = cfg.scale_factor ** level
        if level == 0:
            lvl = img
        else:
            size = (int(round(w / scale)), int(round(h / scale)))
            if min(size) <= 2 * BORDER + 1:
                break
            lvl = cv2.resize(img, size, interpolation=cv2.INTER_LINEAR)
        levels.append(lvl)
        us, vs, sc = _level_corners(lvl, cfg)
        cands.append(np.stack([-sc, np.full(us.size, level), vs, us], axis=1))
    c = np.concatenate(cands) if cands else np.zeros((0, 4))
    c = c[np.lexsort((c[:, 3], c[:, 2], c[:, 1], c[:, 0]))]

    # descending score; descriptors only computed for what can survive the cap
    kp, sc, de = [], [], []
    start = 0
    while len(kp) < cfg.max_features and start < len(c):
        chunk = c[start:start + 2 * cfg.max_features]
        start += len(chunk)
        descs = np.zeros((len(chunk), DESCRIPTOR_DIM))
        for level in np.unique(chunk[:, 1]).astype(int):
            sel = chunk[:, 1] == level
            descs[sel] = patch_descriptors(levels[level], chunk[sel, 3], chunk[sel, 2])
        scale = cfg.scale_factor ** chunk[:, 1]
        pts = np.stack([chunk[:, 3] * scale, chunk[:, 2] * scale], axis=1)
        ok = ((np.linalg.norm(descs, axis=1) > 0.5)
              & (pts[:, 0] <= w - 1) & (pts[:, 1] <= h - 1))
        for i in np.nonzero(ok)[0]:
            if len(kp) == cfg.max_features:
                break
            kp.append(pts[i])
            sc.append(-chunk[i, 0])
            de.append(descs[i])
    if not kp:
        return FeatureSet.empty((w, h))
    return FeatureSet(np.array(kp), np.array(sc), np.array(de), (w, h))


# --------------------------------------------------------------------------- extractors


class Extractor:
    """Interface: turn a grayscale image into a :class:`FeatureSet`."""

    name = "extractor"

    def extract(self, image) -> FeatureSet:
        raise NotImplementedError

    def extract_frame(self, frame) -> FeatureSet:
        return self.extract(to_grayscale(frame.rgb))

    def keypoint_depths(self, frame, fs: FeatureSet):
        """Depth (meters, 0 = invalid) at the nearest pixel of each keypoint."""
        if len(fs) == 0:
            return np.zeros(0)
        h, w = frame.depth.shape
        u = np.clip(np.floor(fs.keypoints[:, 0] + 0.5).astype(int), 0, w - 1)
        v = np.clip(np.floor(fs.keypoints[:, 1] + 0.5).astype(int), 0, h - 1)
        d = frame.depth[v, u].astype(np.float64)
        d[~np.isfinite(d)] = 0.0
        return d


class BuiltinExtractor(Extractor):
    name = "builtin"

    def __init__(self, cfg: Optional[ExtractorConfig] = None):
        self.cfg = cfg or ExtractorConfig()

    def extract(self, image) -> FeatureSet:
        return builtin_grid_detect(image, self.cfg)
