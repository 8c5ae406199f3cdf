"""Trajectory evaluation: rigid alignment, ATE statistics, comparison tables
and SVG trajectory plots.

ATE here is translational only: after a least-squares rigid alignment of
the estimated positions onto the ground truth, each associated pose
contributes the Euclidean distance between the two positions.
"""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .dataset import DEFAULT_MAX_DIFFERENCE, associate_timestamps
from .errors import (
    DegenerateGeometry, LengthMismatch, NonPositiveBaseline, TooFewAssociations, WriteFailure,
)
from .geometry import Pose

FAILED = "x"


# --------------------------------------------------------------------------- alignment


def _check_spread(p, name, tol=1e-9):
    s = np.linalg.svd(p - p.mean(0), compute_uv=False)
    if s[0] <= tol or s[1] <= tol * max(1.0, s[0]):
        raise DegenerateGeometry(f"{name} positions are collinear or coincident")


def align_rigid(est, gt) -> Pose:
    """Rotation and translation (no scale) minimizing ``sum |T est_i - gt_i|^2``.

    Closed form from the SVD of the cross-covariance, with the determinant
    correction that keeps the result a proper rotation.
    """
    est = np.asarray(est, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(est) != len(gt):
        raise LengthMismatch(f"{len(est)} estimated vs {len(gt)} ground-truth positions")
    if len(est) < 3:
        raise DegenerateGeometry(f"need at least 3 positions, got {len(est)}")
    _check_spread(est, "estimated")
    _check_spread(gt, "ground-truth")
    me, mg = est.mean(0), gt.mean(0)
    H = (gt - mg).T @ (est - me)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    R = U @ D @ Vt
    return Pose.from_rt(R, mg - R @ me)


# --------------------------------------------------------------------------- ATE


@dataclass(frozen=True)
class ATEStats:
    """RMSE, mean, median and population SD of the position errors (meters).

    Only ``rmse`` is required so that published single-number results can be
    tabulated next to computed ones.
    """

    rmse: float
    mean: Optional[float] = None
    median: Optional[float] = None
    sd: Optional[float] = None
    pair_count: int = 0

    @classmethod
    def from_errors(cls, errors):
        e = np.asarray(errors, dtype=np.float64)
        n = len(e)
        mean = math.fsum(e) / n
        rmse = math.sqrt(math.fsum(e * e) / n)
        median = float(np.sort(e)[(n - 1) // 2])  # lower middle
        sd = math.sqrt(math.fsum((e - mean) ** 2) / n)
        return cls(rmse, mean, median, sd, n)

    def as_dict(self):
        return {"rmse": self.rmse, "mean": self.mean, "median": self.median, "sd": self.sd,
                "pair_count": self.pair_count}


@dataclass
class ATEResult:
    stats: ATEStats
    alignment: Pose
    timestamps: np.ndarray
    aligned_est: np.ndarray
    gt: np.ndarray
    errors: np.ndarray


def associated_positions(est_traj, gt_traj, max_difference=DEFAULT_MAX_DIFFERENCE):
    pairs = associate_timestamps([t for t, _ in est_traj], [t for t, _ in gt_traj],
                                 max_difference)
    ts = np.array([p.ts_a for p in pairs])
    est = np.array([est_traj[p.index_a][1].translation for p in pairs]).reshape(-1, 3)
    gt = np.array([gt_traj[p.index_b][1].translation for p in pairs]).reshape(-1, 3)
    return ts, est, gt


def evaluate_ate(est_traj, gt_traj, max_difference=DEFAULT_MAX_DIFFERENCE) -> ATEResult:
    """Associate, align and measure; keeps the aligned positions for plotting."""
    est_traj = sorted(est_traj, key=lambda x: x[0])
    gt_traj = sorted(gt_traj, key=lambda x: x[0])
    ts, est, gt = associated_positions(est_traj, gt_traj, max_difference)
    if len(ts) < 3:
        raise TooFewAssociations(len(ts))
    T = align_rigid(est, gt)
    aligned = T.apply(est)
    errors = np.linalg.norm(aligned - gt, axis=1)
    return ATEResult(ATEStats.from_errors(errors), T, ts, aligned, gt, errors)


def compute_ate(est_traj, gt_traj, max_difference=DEFAULT_MAX_DIFFERENCE) -> ATEStats:
    """Absolute trajectory error of ``est_traj`` against ``gt_traj``.

    Both are lists of ``(timestamp, Pose)``. Even-length medians take the
    lower middle element.
    """
    return evaluate_ate(est_traj, gt_traj, max_difference).stats


def format_stats(stats: ATEStats, places=3):
    cells = [("rmse", stats.rmse), ("mean", stats.mean), ("median", stats.median),
             ("sd", stats.sd)]
    body = "  ".join(f"{k} {round_half_up(v, places)}" for k, v in cells if v is not None)
    return f"{body}  pairs {stats.pair_count}"


# --------------------------------------------------------------------------- tables


def round_half_up(x, places):
    """Decimal rendering of ``x`` as written (its shortest repr), halves rounded up."""
    q = Decimal(1).scaleb(-places)
    return str(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


def rmse_boost(baseline_rmse, candidate_rmse):
    """Relative RMSE reduction in percent; a failed baseline (None) counts as 100."""
    if baseline_rmse is None:
        return 100.0
    if not baseline_rmse > 0:
        raise NonPositiveBaseline(f"baseline RMSE must be positive, got {baseline_rmse}")
    return 100.0 * (baseline_rmse - candidate_rmse) / baseline_rmse


@dataclass
class ComparisonRow:
    sequence: str
    baseline: Optional[ATEStats]  # None: the baseline produced no trajectory
    candidate: Optional[ATEStats]

    @property
    def rmse_boost_percent(self):
        if self.candidate is None:
            return None
        return rmse_boost(None if self.baseline is None else self.baseline.rmse,
                          self.candidate.rmse)

    def values(self):
        out = []
        for s in (self.baseline, self.candidate):
            for f in STAT_FIELDS:
                out.append(None if s is None else getattr(s, f))
        out.append(self.rmse_boost_percent)
        return out


STAT_FIELDS = ("rmse", "mean", "median", "sd")
COMPARISON_COLUMNS = tuple(f"baseline_{f}" for f in STAT_FIELDS) + tuple(
    f"candidate_{f}" for f in STAT_FIELDS) + ("rmse_boost",)


def column_means(matrix):
    """Mean of each column over the rows that have a value; (means, counts)."""
    n_cols = max((len(r) for r in matrix), default=0)
    means, counts = [], []
    for j in range(n_cols):
        vals = [r[j] for r in matrix if j < len(r) and r[j] is not None]
        counts.append(len(vals))
        means.append(math.fsum(vals) / len(vals) if vals else None)
    return means, counts


@dataclass
class SummaryTable:
    labels: list
    columns: tuple
    rows: list  # list of lists, None for missing
    average: list
    counts: list
    notes: list = field(default_factory=list)


def summarize_table(rows: Sequence[ComparisonRow]) -> SummaryTable:
    """Comparison rows plus an ``Avg.`` row: each column is averaged over the
    rows that have a value there; failed entries are left out and noted."""
    if not rows:
        raise ValueError("summarize_table needs at least one row")
    matrix = [r.values() for r in rows]
    means, counts = column_means(matrix)
    notes = []
    for r in rows:
        if r.baseline is None:
            notes.append(f"{r.sequence}: baseline failed, excluded from baseline averages")
        if r.candidate is None:
            notes.append(f"{r.sequence}: candidate failed, excluded from candidate averages")
    return SummaryTable([r.sequence for r in rows], COMPARISON_COLUMNS, matrix, means, counts,
                        notes)


def summarize_grid(labels, columns, values) -> SummaryTable:
    """Average a free-form grid (e.g. sequences x systems) column-wise."""
    means, counts = column_means(values)
    return SummaryTable(list(labels), tuple(columns), [list(v) for v in values], means, counts)


def row_means(values):
    """Per-row mean over present entries (the Avg. column of a systems x sequences table)."""
    out = []
    for r in values:
        vals = [v for v in r if v is not None]
        out.append(math.fsum(vals) / len(vals) if vals else None)
    return out


def _cell(v, places):
    return FAILED if v is None else round_half_up(v, places)


def _places(columns):
    return [2 if c == "rmse_boost" else 3 for c in columns]


def render_text(table: SummaryTable, title=None, first="Seq.", average_row=True):
    """Aligned-column text rendering, by default with an ``Avg.`` row."""
    places = _places(table.columns)
    header = [first] + list(table.columns)
    body = [[lab] + [_cell(v, p) for v, p in zip(row, places)]
            for lab, row in zip(table.labels, table.rows)]
    if average_row:
        body.append(["Avg."] + [_cell(v, p) for v, p in zip(table.average, places)])
    widths = [max(len(r[j]) for r in [header] + body) for j in range(len(header))]
    lines = [title] if title else []
    for r in [header] + body:
        lines.append("  ".join(c.ljust(w) if j == 0 else c.rjust(w)
                               for j, (c, w) in enumerate(zip(r, widths))).rstrip())
    lines += [f"note: {n}" for n in table.notes]
    return "\n".join(lines) + "\n"


def render_csv(table: SummaryTable, first="sequence", average_row=True):
    places = _places(table.columns)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([first] + list(table.columns))
    for lab, row in zip(table.labels, table.rows):
        w.writerow([lab] + [_cell(v, p) for v, p in zip(row, places)])
    if average_row:
        w.writerow(["Avg."] + [_cell(v, p) for v, p in zip(table.average, places)])
    return buf.getvalue()


# --------------------------------------------------------------------------- plots

SVG_W, SVG_H = 640, 480
MARGIN = 60
COLORS = {"estimate": "#1f77b4", "ground truth": "#d62728"}


def _fmt(v):
    s = f"{v:.6f}"
    return "0.000000" if s == "-0.000000" else s


def _polyline(xy, color, label):
    pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in xy)
    return (f'<polyline class="{escape(label)}" fill="none" stroke="{color}" stroke-width="1.5" '
            f'vector-effect="non-scaling-stroke" points="{pts}"/>')


def trajectory_svg(est_xy, gt_xy=None, notice=None, title="trajectory"):
    """SVG document with polylines in data coordinates (meters).

    A single group transform maps meters to the canvas with equal axis
    scales, so the points attribute of each polyline can be read back as
    trajectory coordinates.
    """
    est_xy = np.asarray(est_xy, dtype=np.float64).reshape(-1, 2)
    gt_xy = np.zeros((0, 2)) if gt_xy is None else np.asarray(gt_xy, np.float64).reshape(-1, 2)
    allp = np.vstack([est_xy, gt_xy]) if len(est_xy) + len(gt_xy) else np.zeros((1, 2))
    lo, hi = allp.min(0), allp.max(0)
    span = max(float((hi - lo).max()), 1e-9)
    scale = min((SVG_W - 2 * MARGIN), (SVG_H - 2 * MARGIN)) / span
    cx, cy = (lo + hi) / 2
    # x right, y up on the canvas
    tx = SVG_W / 2 - scale * cx
    ty = SVG_H / 2 + scale * cy
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" '
        f'viewBox="0 0 {SVG_W} {SVG_H}">',
        f"<title>{escape(title)}</title>",
        f'<rect x="0" y="0" width="{SVG_W}" height="{SVG_H}" fill="white"/>',
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{SVG_W - 2 * MARGIN}" '
        f'height="{SVG_H - 2 * MARGIN}" fill="none" stroke="#888"/>',
        f'<g id="data" transform="matrix({_fmt(scale)} 0 0 {_fmt(-scale)} {_fmt(tx)} {_fmt(ty)})">',
    ]
    if len(gt_xy):
        out.append(_polyline(gt_xy, COLORS["ground truth"], "ground truth"))
    if len(est_xy):
        out.append(_polyline(est_xy, COLORS["estimate"], "estimate"))
    out.append("</g>")
    # axis extents as labelled ticks
    x0, x1 = (MARGIN - tx) / scale, (SVG_W - MARGIN - tx) / scale
    y0, y1 = (ty - (SVG_H - MARGIN)) / scale, (ty - MARGIN) / scale
    out += [
        f'<text x="{MARGIN}" y="{SVG_H - MARGIN + 16}" font-size="11">{_fmt(x0)}</text>',
        f'<text x="{SVG_W - MARGIN}" y="{SVG_H - MARGIN + 16}" font-size="11" '
        f'text-anchor="end">{_fmt(x1)}</text>',
        f'<text x="{MARGIN - 4}" y="{SVG_H - MARGIN}" font-size="11" text-anchor="end">'
        f"{_fmt(y0)}</text>",
        f'<text x="{MARGIN - 4}" y="{MARGIN + 10}" font-size="11" text-anchor="end">'
        f"{_fmt(y1)}</text>",
        f'<text x="{SVG_W / 2:.1f}" y="{SVG_H - 20}" font-size="13" text-anchor="middle">x [m]</text>',
        f'<text x="18" y="{SVG_H / 2:.1f}" font-size="13" text-anchor="middle" '
        f'transform="rotate(-90 18 {SVG_H / 2:.1f})">y [m]</text>',
    ]
    legend = [("estimate", len(est_xy))] + ([("ground truth", 1)] if len(gt_xy) else [])
    for i, (name, _) in enumerate(legend):
        y = MARGIN + 16 + 18 * i
        x = SVG_W - MARGIN - 110
        out.append(f'<line x1="{x}" y1="{y - 4}" x2="{x + 24}" y2="{y - 4}" '
                   f'stroke="{COLORS[name]}" stroke-width="2"/>')
        out.append(f'<text x="{x + 30}" y="{y}" font-size="12">{name}</text>')
    if notice:
        out.append(f'<text class="notice" x="{MARGIN + 6}" y="{MARGIN + 16}" font-size="12" '
                   f'fill="#a00">{escape(notice)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_trajectory(est_traj, gt_traj, out_path, max_difference=DEFAULT_MAX_DIFFERENCE,
                    title="trajectory"):
    """Top-down (x-y) SVG of the estimate aligned onto the ground truth.

    With no usable ground truth the estimate is drawn as is, with a notice.
    """
    est_traj = sorted(est_traj, key=lambda x: x[0])
    est = np.array([p.translation for _, p in est_traj]).reshape(-1, 3)
    notice = None
    gt_xy = None
    if not gt_traj:
        notice = "no ground truth: estimate shown unaligned"
        est_xy = est[:, :2]
    else:
        gt = np.array([p.translation for _, p in sorted(gt_traj, key=lambda x: x[0])])
        try:
            res = evaluate_ate(est_traj, gt_traj, max_difference)
            est_xy = res.alignment.apply(est)[:, :2]
        except (TooFewAssociations, DegenerateGeometry) as e:
            notice = f"estimate not aligned: {e}"
            est_xy = est[:, :2]
        gt_xy = gt[:, :2]
    svg = trajectory_svg(est_xy, gt_xy, notice, title)
    try:
        Path(out_path).write_text(svg)
    except OSError as e:
        raise WriteFailure(f"cannot write {out_path}: {e}") from e
    return Path(out_path)


def read_svg_polylines(path):
    """Polyline point lists keyed by class, for checking plots."""
    text = Path(path).read_text()
    out = {}
    for cls, pts in re.findall(r'<polyline class="([^"]*)"[^>]*points="([^"]*)"', text):
        out[cls] = np.array([[float(a) for a in p.split(",")] for p in pts.split()])
    return out
