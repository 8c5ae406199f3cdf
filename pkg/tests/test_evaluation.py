import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from selmvo.errors import (
    DegenerateGeometry, LengthMismatch, NonPositiveBaseline, TooFewAssociations, WriteFailure,
)
from selmvo.evaluation import (
    ATEStats, ComparisonRow, align_rigid, compute_ate, plot_trajectory, read_svg_polylines,
    render_csv, render_text, rmse_boost, round_half_up, summarize_table,
)
from selmvo.geometry import Pose, compose, pose_distance

from helpers import random_pose
from oracles import ate_stats_reference
from published import TABLE1, TABLE4


def traj(positions, t0=0.0, dt=0.1):
    return [(t0 + i * dt, Pose(translation=p)) for i, p in enumerate(positions)]


def test_align_identity():
    rng = np.random.default_rng(0)
    p = rng.normal(size=(10, 3))
    T = align_rigid(p, p)
    ang, dist = pose_distance(T, Pose.identity())
    assert ang < 1e-9 and dist < 1e-9


def test_align_exact_recovery():
    rng = np.random.default_rng(1)
    for _ in range(50):
        G = random_pose(rng, 5.0)
        p = rng.normal(size=(20, 3))
        T = align_rigid(p, G.apply(p))
        ang, dist = pose_distance(T, G)
        assert ang < 1e-9 and dist < 1e-9


def test_align_beats_random_candidates():
    rng = np.random.default_rng(2)
    est = rng.normal(size=(30, 3))
    G = random_pose(rng)
    gt = G.apply(est) + rng.normal(0, 0.05, est.shape)
    T = align_rigid(est, gt)
    best = np.sum((T.apply(est) - gt) ** 2)
    for i in range(10000):
        if i % 2:
            C = random_pose(rng, 3.0)
        else:  # near the optimum
            D = Pose(np.r_[1.0, rng.normal(0, 0.02, 3)], rng.normal(0, 0.02, 3))
            C = compose(D, T)
        assert np.sum((C.apply(est) - gt) ** 2) >= best - 1e-12


def test_align_errors():
    with pytest.raises(LengthMismatch):
        align_rigid(np.zeros((4, 3)), np.zeros((5, 3)))
    line = np.outer(np.arange(6.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateGeometry):
        align_rigid(line, line)
    with pytest.raises(DegenerateGeometry):
        align_rigid(np.ones((5, 3)), np.ones((5, 3)))


def test_align_proper_rotation_under_reflection():
    rng = np.random.default_rng(3)
    est = rng.normal(size=(10, 3))
    gt = est * [1, 1, -1]  # mirror image: best proper rotation, never a reflection
    T = align_rigid(est, gt)
    assert np.isclose(np.linalg.det(T.R), 1.0)


def test_ate_zero_cases():
    rng = np.random.default_rng(4)
    gt = traj(rng.normal(size=(20, 3)))
    assert compute_ate(gt, gt).rmse < 1e-12
    G = random_pose(rng, 10.0)
    moved = [(t, compose(G, p)) for t, p in gt]
    s = compute_ate(moved, gt)
    assert s.rmse < 1e-9 and s.pair_count == 20


def test_ate_statistics_arithmetic():
    s = ATEStats.from_errors([0, 0, 0, 3, 4])
    assert s.rmse == pytest.approx(math.sqrt(5), abs=1e-12)
    assert s.mean == pytest.approx(1.4)
    assert s.median == 0.0
    assert s.sd == pytest.approx(1.7436, abs=1e-4)
    assert ATEStats.from_errors([1.0, 2.0, 3.0, 4.0]).median == 2.0


def test_ate_matches_oracle():
    rng = np.random.default_rng(5)
    for _ in range(50):
        n = int(rng.integers(3, 60))
        gt = rng.normal(size=(n, 3)) * 2
        est = random_pose(rng).apply(gt + rng.normal(0, 0.1, gt.shape))
        s = compute_ate(traj(est), traj(gt))
        ref = ate_stats_reference(est, gt)
        np.testing.assert_allclose([s.rmse, s.mean, s.median, s.sd], ref, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(3, 40))
def test_ate_identities(seed, n):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(n, 3))
    est = gt + rng.normal(0, 0.3, gt.shape)
    try:
        result = compute_ate(traj(est), traj(gt))
    except DegenerateGeometry:
        return
    s = result
    assert s.rmse >= s.mean - 1e-15 >= -1e-15
    assert abs(s.sd ** 2 - (s.rmse ** 2 - s.mean ** 2)) < 1e-12
    G = random_pose(rng)
    t = compute_ate([(ts, compose(G, p)) for ts, p in traj(est)], traj(gt))
    np.testing.assert_allclose([t.rmse, t.mean, t.median, t.sd], [s.rmse, s.mean, s.median, s.sd],
                               atol=1e-9)


def test_ate_association_and_too_few():
    rng = np.random.default_rng(6)
    p = rng.normal(size=(10, 3))
    est = traj(p, t0=0.005)  # within 0.02 s of every ground-truth stamp
    assert compute_ate(est, traj(p)).pair_count == 10
    with pytest.raises(TooFewAssociations):
        compute_ate(traj(p[:2]), traj(p))
    with pytest.raises(TooFewAssociations):
        compute_ate(traj(p, t0=5.0), traj(p))


def test_rmse_boost_examples():
    assert round(rmse_boost(0.982, 0.04), 2) == 95.93
    assert round(rmse_boost(0.02, 0.019), 2) == 5.00
    assert rmse_boost(None, 0.04) == 100.0
    with pytest.raises(NonPositiveBaseline):
        rmse_boost(0.0, 0.1)


@pytest.mark.parametrize("seq", sorted(TABLE1))
def test_rmse_boost_table(seq):
    base, cand, boost = TABLE1[seq]
    got = rmse_boost(None if base is None else base[0], cand[0])
    assert abs(round(got, 2) - boost) <= 0.01
    if base is not None:
        assert got == pytest.approx(100 * (1 - cand[0] / base[0]), abs=1e-12)


def _rows(baseline_system):
    b = TABLE4[baseline_system][0]
    c = TABLE4["SELM-SLAM3"][0]
    return [ComparisonRow(s, ATEStats(b[s]), ATEStats(c[s])) for s in ("P037", "P038")]


def test_summarize_table4_1000f():
    t = summarize_table(_rows("ORB-SLAM3 1000F"))
    assert round_half_up(t.average[0], 3) == "3.861"
    assert t.average[4] == pytest.approx(0.0345)
    assert round_half_up(t.average[4], 3) == "0.035"


def test_summarize_single_row():
    row = ComparisonRow("a", ATEStats(0.5, 0.4, 0.3, 0.2, 10), ATEStats(0.1, 0.1, 0.1, 0.0, 10))
    t = summarize_table([row])
    assert t.average == row.values()


def test_summarize_excludes_failed_entries():
    rows = [ComparisonRow(s, None if b is None else ATEStats(*b), ATEStats(*c))
            for s, (b, c, _) in TABLE1.items()]
    t = summarize_table(rows)
    assert t.counts[0] == 7 and t.counts[4] == 8 and t.counts[8] == 8
    assert round_half_up(t.average[0], 3) == "0.456"
    assert round_half_up(t.average[8], 2) == "66.44"
    assert any("floor" in n for n in t.notes)
    text = render_text(t)
    floor = next(line for line in text.splitlines() if line.startswith("floor"))
    assert floor.split()[1:5] == ["x"] * 4 and floor.split()[-1] == "100.00"
    csv_text = render_csv(t)
    assert csv_text.splitlines()[-1].startswith("Avg.,0.456,")


def test_round_half_up():
    assert round_half_up(0.0345, 3) == "0.035"
    assert round_half_up(2.675, 2) == "2.68"  # binary 2.67499..., rendered as written
    assert round_half_up(5, 2) == "5.00"


def test_plot_coincident(tmp_path):
    rng = np.random.default_rng(7)
    gt = traj(rng.normal(size=(12, 3)))
    out = plot_trajectory(gt, gt, tmp_path / "p.svg")
    lines = read_svg_polylines(out)
    np.testing.assert_allclose(lines["estimate"], lines["ground truth"], atol=2e-6)
    text = out.read_text()
    assert "x [m]" in text and "y [m]" in text and ">estimate<" in text and ">ground truth<" in text


def test_plot_square_corners(tmp_path):
    sq = [[0, 0, 0], [1, 0, 0], [1, 1, 0.5], [0, 1, 0.5]]
    out = plot_trajectory(traj(sq), traj(sq), tmp_path / "sq.svg")
    np.testing.assert_allclose(read_svg_polylines(out)["ground truth"],
                               [[0, 0], [1, 0], [1, 1], [0, 1]], atol=1e-6)


def test_plot_estimate_only_and_deterministic(tmp_path):
    est = traj([[0, 0, 0], [1, 2, 0], [2, 1, 0]])
    a = plot_trajectory(est, [], tmp_path / "a.svg").read_bytes()
    b = plot_trajectory(est, [], tmp_path / "b.svg").read_bytes()
    assert a == b
    assert b"no ground truth" in a
    assert set(read_svg_polylines(tmp_path / "a.svg")) == {"estimate"}


def test_plot_write_failure(tmp_path):
    with pytest.raises(WriteFailure):
        plot_trajectory(traj([[0, 0, 0]]), [], tmp_path / "missing" / "x.svg")
