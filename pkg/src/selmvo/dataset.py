"""Dataset ingestion: TUM RGB-D / ICL-NUIM sequences and TartanAir conversion.

File formats follow the TUM RGB-D benchmark tools:

* index files (``rgb.txt``, ``depth.txt``): ``timestamp path`` per line
* trajectories (``groundtruth.txt``): ``timestamp tx ty tz qx qy qz qw``
* depth PNGs: 16 bit, ``raw = meters * depth_factor``

Lines starting with ``#`` are comments everywhere.
"""

from __future__ import annotations

import logging
import shutil
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import cv2
import numpy as np

from .errors import (
    FrameCountMismatch, ImageDecodeError, MalformedLine, MissingIndexFile, MissingPoseFile,
)
from .geometry import Intrinsics, Pose, ned_to_camera, rebase_trajectory

log = logging.getLogger(__name__)

DEFAULT_MAX_DIFFERENCE = 0.02
READ_AHEAD = 8
TARTANAIR_FPS = 30.0
UINT16_MAX = 65535


@dataclass
class SequenceFrame:
    timestamp: float
    rgb: np.ndarray
    depth: np.ndarray  # meters, 0 = invalid
    ground_truth: Optional[Pose] = None
    index: int = 0

    def __post_init__(self):
        if self.rgb.shape[:2] != self.depth.shape[:2]:
            raise ValueError(f"rgb {self.rgb.shape[:2]} and depth {self.depth.shape[:2]} differ")


@dataclass(frozen=True)
class AssociationPair:
    ts_a: float
    ts_b: float
    index_a: int
    index_b: int


def associate_timestamps(list_a, list_b, max_difference=DEFAULT_MAX_DIFFERENCE):
    """Greedy one-to-one association of two timestamp lists.

    Candidate pairs closer than ``max_difference`` are taken in order of
    increasing ``|ts_a - ts_b|`` (ties: lower index_a, then lower index_b),
    skipping any whose endpoints are already used. This is the rule of the
    TUM ``associate.py`` tool. The result is sorted by ``ts_a``.
    """
    a = np.asarray(list_a, dtype=float)
    b = np.asarray(list_b, dtype=float)
    if a.size == 0 or b.size == 0:
        return []
    candidates = []
    # both lists sorted: for each a only a contiguous window of b can qualify
    lo = np.searchsorted(b, a - max_difference, side="left")
    hi = np.searchsorted(b, a + max_difference, side="right")
    for i in range(a.size):
        for j in range(lo[i], hi[i]):
            d = abs(a[i] - b[j])
            if d <= max_difference:
                candidates.append((d, i, j))
    candidates.sort()
    used_a, used_b = set(), set()
    pairs = []
    for d, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append(AssociationPair(float(a[i]), float(b[j]), i, j))
    pairs.sort(key=lambda p: (p.ts_a, p.index_a))
    return pairs


def _data_lines(path):
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            yield line_no, s


def read_index_file(path):
    """Parse a TUM ``timestamp path`` index file, sorted by timestamp."""
    path = Path(path)
    if not path.is_file():
        raise MissingIndexFile(f"missing index file {path}")
    entries = []
    for line_no, s in _data_lines(path):
        parts = s.split()
        if len(parts) < 2:
            raise MalformedLine(path, line_no, s)
        try:
            ts = float(parts[0])
        except ValueError:
            raise MalformedLine(path, line_no, s) from None
        entries.append((ts, parts[1]))
    entries.sort(key=lambda e: e[0])
    return entries


def read_trajectory(path):
    """Parse a TUM trajectory file into a list of ``(timestamp, Pose)``."""
    path = Path(path)
    if not path.is_file():
        raise MissingIndexFile(f"missing trajectory file {path}")
    traj = []
    for line_no, s in _data_lines(path):
        parts = s.replace(",", " ").split()
        if len(parts) != 8:
            raise MalformedLine(path, line_no, s)
        try:
            vals = [float(x) for x in parts]
        except ValueError:
            raise MalformedLine(path, line_no, s) from None
        if not np.all(np.isfinite(vals)) or np.linalg.norm(vals[4:]) == 0:
            raise MalformedLine(path, line_no, s)
        traj.append((vals[0], Pose.from_xyzw(vals[1:4], vals[4:8])))
    traj.sort(key=lambda e: e[0])
    return traj


def format_pose_line(timestamp, pose: Pose):
    t = pose.translation
    q = pose.quat_xyzw()
    vals = " ".join(f"{v:.9f}" for v in (*t, *q))
    return f"{timestamp:.6f} {vals}"


def write_trajectory(path, trajectory, header=None):
    """Write ``(timestamp, Pose)`` pairs in TUM format."""
    lines = []
    if header:
        lines.append(f"# {header}")
    lines += [format_pose_line(ts, p) for ts, p in trajectory]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def decode_rgb(path):
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise ImageDecodeError(path)
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def decode_depth(path, depth_factor):
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None or raw.ndim != 2:
        raise ImageDecodeError(path)
    return raw.astype(np.float64) / depth_factor


def encode_depth(depth_m, depth_factor=5000.0):
    """Metric depth -> uint16 raw image plus count of clamped pixels.

    Pixels that would overflow 16 bits are written as 0 (invalid), as are
    non-finite and non-positive depths.
    """
    d = np.asarray(depth_m, dtype=np.float64)
    raw = np.rint(np.where(np.isfinite(d), d, 0.0) * depth_factor)
    overflow = raw > UINT16_MAX
    raw[overflow | (raw < 0)] = 0
    return raw.astype(np.uint16), int(overflow.sum())


def write_depth_png(path, depth_m, depth_factor=5000.0):
    raw, clamped = encode_depth(depth_m, depth_factor)
    if not cv2.imwrite(str(path), raw):
        raise OSError(f"cannot write {path}")
    return clamped


def load_tum_sequence(root_path, k: Intrinsics, max_difference=DEFAULT_MAX_DIFFERENCE,
                      read_ahead=READ_AHEAD) -> Iterator[SequenceFrame]:
    """Stream the frames of a TUM-layout directory in timestamp order.

    Index files are parsed eagerly so format errors surface on the first
    ``next()``; image decoding happens on a background thread at most
    ``read_ahead`` frames ahead of the consumer.
    """
    root = Path(root_path)
    rgb_list = read_index_file(root / "rgb.txt")
    depth_list = read_index_file(root / "depth.txt")
    for entries, name in ((rgb_list, "rgb"), (depth_list, "depth")):
        dirs = {Path(p).parent for _, p in entries}
        for d in dirs:
            if not (root / d).is_dir():
                raise MissingIndexFile(f"{name} directory {root / d} does not exist")
    gt = read_trajectory(root / "groundtruth.txt") if (root / "groundtruth.txt").is_file() else []

    pairs = associate_timestamps([t for t, _ in rgb_list], [t for t, _ in depth_list],
                                 max_difference)
    gt_for = {}
    if gt:
        rgb_ts = [rgb_list[p.index_a][0] for p in pairs]
        for m in associate_timestamps(rgb_ts, [t for t, _ in gt], max_difference):
            gt_for[m.index_a] = gt[m.index_b][1]
    log.info("%s: %d rgb, %d depth, %d associated, %d with ground truth",
             root, len(rgb_list), len(depth_list), len(pairs), len(gt_for))

    def decode(i):
        p = pairs[i]
        ts, rgb_rel = rgb_list[p.index_a]
        rgb = decode_rgb(root / rgb_rel)
        depth = decode_depth(root / depth_list[p.index_b][1], k.depth_factor)
        return SequenceFrame(ts, rgb, depth, gt_for.get(i), index=i)

    return _prefetch(decode, len(pairs), read_ahead)


def _prefetch(fn, n, window):
    # generator body: executor lives exactly as long as iteration
    with ThreadPoolExecutor(max_workers=1) as pool:
        pending = deque()
        nxt = 0
        try:
            while nxt < n or pending:
                while nxt < n and len(pending) < window:
                    pending.append(pool.submit(fn, nxt))
                    nxt += 1
                yield pending.popleft().result()
        finally:
            for f in pending:
                f.cancel()


def sequence_ground_truth(root_path):
    """Ground-truth trajectory of a TUM-layout directory (empty if absent)."""
    p = Path(root_path) / "groundtruth.txt"
    return read_trajectory(p) if p.is_file() else []


# --------------------------------------------------------------------------- writers


def write_tum_sequence(out_path, frames, depth_factor=5000.0, header="selmvo"):
    """Write ``SequenceFrame`` objects as a TUM-layout directory.

    Returns the number of depth pixels clamped to invalid.
    """
    out = Path(out_path)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    rgb_lines, depth_lines, gt = [], [], []
    clamped = 0
    for f in frames:
        name = f"{f.timestamp:.6f}.png"
        if not cv2.imwrite(str(out / "rgb" / name), cv2.cvtColor(f.rgb, cv2.COLOR_RGB2BGR)):
            raise OSError(f"cannot write rgb/{name}")
        clamped += write_depth_png(out / "depth" / name, f.depth, depth_factor)
        rgb_lines.append(f"{f.timestamp:.6f} rgb/{name}")
        depth_lines.append(f"{f.timestamp:.6f} depth/{name}")
        if f.ground_truth is not None:
            gt.append((f.timestamp, f.ground_truth))
    _write_index(out / "rgb.txt", rgb_lines, f"color images ({header})")
    _write_index(out / "depth.txt", depth_lines, f"depth images ({header})")
    if gt:
        write_trajectory(out / "groundtruth.txt", gt, header="timestamp tx ty tz qx qy qz qw")
    return clamped


def _write_index(path, lines, title):
    text = f"# {title}\n# timestamp filename\n" + "\n".join(lines) + "\n"
    Path(path).write_text(text)


# --------------------------------------------------------------------------- TartanAir


@dataclass
class ConversionReport:
    frame_count: int
    pose_count: int
    camera: str = "left"
    quaternion_order: str = "xyzw"
    quaternion_order_source: str = "dataset layout"
    depth_factor: float = 5000.0
    clamped_depth_pixels: int = 0
    fps: float = TARTANAIR_FPS
    first_pose_source: list = field(default_factory=list)

    def as_dict(self):
        return {
            "frame_count": self.frame_count,
            "pose_count": self.pose_count,
            "camera": self.camera,
            "quaternion_order": self.quaternion_order,
            "quaternion_order_source": self.quaternion_order_source,
            "depth_factor": self.depth_factor,
            "clamped_depth_pixels": self.clamped_depth_pixels,
            "fps": self.fps,
            "first_pose_source": list(self.first_pose_source),
        }


def quaternion_order_from_header(path):
    """Quaternion order named by a ``# ... qx qy qz qw`` style header, if any."""
    with open(path) as fh:
        for line in fh:
            s = line.strip()
            if s and not s.startswith("#"):
                return None
            names = [t for t in s.lstrip("#").split() if t.lower() in ("qx", "qy", "qz", "qw")]
            if len(names) == 4:
                return "".join(t[1].lower() for t in names)
    return None


def read_tartanair_poses(path, order=None):
    """Read a TartanAir ``pose_*.txt``: ``tx ty tz`` plus a quaternion in NED.

    The quaternion order comes from ``order``, else from a header comment in
    the file, else the dataset's published layout ``qx qy qz qw``.
    Returns (poses, order, source).
    """
    path = Path(path)
    if not path.is_file():
        raise MissingPoseFile(f"missing pose file {path}")
    source = "argument"
    if order is None:
        order = quaternion_order_from_header(path)
        source = "header" if order else "dataset layout"
        order = order or "xyzw"
    if order not in ("xyzw", "wxyz"):
        raise ValueError(f"unsupported quaternion order {order!r}")
    poses = []
    for line_no, s in _data_lines(path):
        parts = s.split()
        if len(parts) != 7:
            raise MalformedLine(path, line_no, s)
        try:
            v = [float(x) for x in parts]
        except ValueError:
            raise MalformedLine(path, line_no, s) from None
        q = v[3:] if order == "xyzw" else v[4:] + v[3:4]
        poses.append(Pose.from_xyzw(v[:3], q))
    return poses, order, source


def convert_tartanair(root_path, out_path, camera="left", depth_factor=5000.0,
                      quaternion_order=None):
    """Convert a TartanAir trajectory folder into a TUM-layout directory.

    Poses are moved from NED to the camera convention and rebased so the
    first one is the identity. Depth is quantized at ``depth_factor``;
    values beyond the 16-bit range become invalid (0). Frames get synthetic
    timestamps at 30 Hz.
    """
    root = Path(root_path)
    out = Path(out_path)
    pose_file = root / f"pose_{camera}.txt"
    poses_ned, order, order_source = read_tartanair_poses(pose_file, quaternion_order)
    images = sorted((root / f"image_{camera}").glob("*.png"))
    depths = sorted((root / f"depth_{camera}").glob("*.npy"))
    if len(images) != len(poses_ned):
        raise FrameCountMismatch(len(images), len(poses_ned))
    if len(depths) != len(images):
        raise FrameCountMismatch(len(images), len(depths))

    poses = rebase_trajectory([ned_to_camera(p) for p in poses_ned])
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    rgb_lines, depth_lines, gt = [], [], []
    clamped = 0
    for i, (img, dep) in enumerate(zip(images, depths)):
        ts = i / TARTANAIR_FPS
        name = f"{i:06d}.png"
        shutil.copyfile(img, out / "rgb" / name)
        clamped += write_depth_png(out / "depth" / name, np.load(dep), depth_factor)
        rgb_lines.append(f"{ts:.6f} rgb/{name}")
        depth_lines.append(f"{ts:.6f} depth/{name}")
        gt.append((ts, poses[i]))
    _write_index(out / "rgb.txt", rgb_lines, f"color images (TartanAir {root.name}, {camera})")
    _write_index(out / "depth.txt", depth_lines, f"depth images (TartanAir {root.name}, {camera})")
    write_trajectory(out / "groundtruth.txt", gt, header="timestamp tx ty tz qx qy qz qw")
    report = ConversionReport(
        frame_count=len(images), pose_count=len(poses_ned), camera=camera,
        quaternion_order=order, quaternion_order_source=order_source,
        depth_factor=depth_factor, clamped_depth_pixels=clamped,
        first_pose_source=[float(x) for x in poses_ned[0].translation],
    )
    if clamped:
        log.warning("%d depth pixels beyond %.3f m set to invalid", clamped,
                    UINT16_MAX / depth_factor)
    return report
