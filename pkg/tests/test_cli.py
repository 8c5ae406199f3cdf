import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from oracles import ate_stats_reference
from published import TABLE1, TABLE4
from selmvo.cli import build_run_config, load_run_config, main, preset_names
from selmvo.dataset import read_trajectory, write_trajectory
from selmvo.errors import ConfigError
from selmvo.geometry import TARTANAIR, Pose, ned_to_camera
from selmvo.synthscene import (SYNTH_K, render_plane_sequence, write_tartanair_fixture,
                               write_tum_fixture)

from helpers import random_pose

K_YAML = {"fx": SYNTH_K.fx, "fy": SYNTH_K.fy, "cx": SYNTH_K.cx, "cy": SYNTH_K.cy,
          "width": SYNTH_K.width, "height": SYNTH_K.height}


def write_config(path, **entries):
    path.write_text(yaml.safe_dump(entries, sort_keys=False))
    return path


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_tum_fixture(root / "seq", render_plane_sequence(10))
    return root


@pytest.fixture(scope="module")
def baseline_run(workdir):
    cfg = write_config(workdir / "run.yaml", preset="baseline-tum", sequence="seq",
                       output_dir="out", intrinsics=K_YAML)
    code = main(["run", str(cfg)])
    return code, workdir / "out"


# ---------------------------------------------------------------- run


def test_shipped_presets():
    assert {"selm", "baseline-tum", "baseline-750f", "baseline-900f", "baseline-1000f",
            "baseline-1200f"} <= set(preset_names())


def test_baseline_preset_materializes_defaults(workdir):
    cfg = build_run_config({"preset": "baseline-1000f", "sequence": "seq", "output_dir": "o"},
                           base_dir=workdir)
    assert cfg.tracker.mode == "baseline"
    assert (cfg.extractor.max_features, cfg.extractor.levels, cfg.extractor.scale_factor) == \
        (1000, 8, 1.2)
    echo = cfg.as_dict()
    assert echo["tracker"]["tracked_ratio_threshold"] == 0.9
    assert echo["matcher"]["implementation"] == "builtin"


def test_run_writes_ten_line_trajectory(baseline_run):
    code, out = baseline_run
    assert code == 0
    assert len((out / "trajectory.txt").read_text().splitlines()) == 10
    assert len((out / "telemetry.jsonl").read_text().splitlines()) == 10
    for name in ("run.json", "map.txt", "groundtruth.txt", "trajectory.svg"):
        assert (out / name).is_file()


def test_run_metadata(baseline_run):
    _, out = baseline_run
    meta = json.loads((out / "run.json").read_text())
    assert meta["status"] == "ok"
    assert meta["config"]["preset"] == "baseline-tum"
    assert meta["config"]["extractor"]["max_features"] == 1000
    assert meta["config"]["intrinsics"]["fx"] == SYNTH_K.fx
    assert meta["git_describe"]
    assert meta["models"] == {}
    assert meta["ate"]["rmse"] < 0.01


def test_run_directory_is_self_describing(baseline_run, capsys):
    _, out = baseline_run
    code = main(["evaluate", str(out / "trajectory.txt"), str(out / "groundtruth.txt"), "--json"])
    stats = json.loads(capsys.readouterr().out)
    meta = json.loads((out / "run.json").read_text())
    assert code == 0
    assert stats["rmse"] == pytest.approx(meta["ate"]["rmse"], abs=1e-9)


def test_run_is_byte_deterministic(workdir, baseline_run):
    _, first = baseline_run
    cfg = write_config(workdir / "again.yaml", preset="baseline-tum", sequence="seq",
                       output_dir="out2", intrinsics=K_YAML)
    assert main(["run", str(cfg)]) == 0
    for name in ("trajectory.txt", "telemetry.jsonl", "trajectory.svg", "map.txt"):
        assert (workdir / "out2" / name).read_bytes() == (first / name).read_bytes()


def test_missing_depth_directory_exits_1(workdir, tmp_path, capsys):
    seq = tmp_path / "seq"
    write_tum_fixture(seq, render_plane_sequence(3))
    for f in (seq / "depth").iterdir():
        f.unlink()
    (seq / "depth").rmdir()
    cfg = write_config(tmp_path / "run.yaml", preset="baseline-tum", sequence="seq",
                       output_dir="out")
    assert main(["run", str(cfg)]) == 1
    assert "MissingIndexFile" in capsys.readouterr().err


def test_tracking_loss_exits_2(tmp_path):
    frames = render_plane_sequence(12)
    for f in frames[4:]:
        f.rgb[:] = 128  # textureless: nothing to detect
    write_tum_fixture(tmp_path / "seq", frames)
    cfg = write_config(tmp_path / "run.yaml", preset="baseline-tum", sequence="seq",
                       output_dir="out", intrinsics=K_YAML)
    assert main(["run", str(cfg)]) == 2
    meta = json.loads((tmp_path / "out" / "run.json").read_text())
    assert meta["status"] == "lost" and meta["stopped_early"]
    assert len(read_trajectory(tmp_path / "out" / "trajectory.txt")) == 4


def test_unknown_field_reports_line(workdir, capsys):
    cfg = workdir / "bad.yaml"
    cfg.write_text("preset: baseline-tum\nsequence: seq\noutput_dir: o\ntracker:\n"
                   "  mode: baseline\n  min_inlier: 3\n")
    assert main(["run", str(cfg)]) == 1
    err = capsys.readouterr().err
    assert "bad.yaml:6" in err and "tracker.min_inlier" in err


def test_invalid_value_reports_field(workdir):
    cfg = workdir / "bad2.yaml"
    cfg.write_text("sequence: seq\noutput_dir: o\nextractor:\n  scale_factor: 0.5\n")
    with pytest.raises(ConfigError, match=r"bad2.yaml:4.*extractor.scale_factor"):
        load_run_config(cfg)


def test_missing_sequence_is_a_config_error(workdir):
    cfg = write_config(workdir / "bad3.yaml", sequence="nowhere", output_dir="o")
    with pytest.raises(ConfigError, match="bad3.yaml:1.*sequence"):
        load_run_config(cfg)


def test_unknown_preset(workdir):
    with pytest.raises(ConfigError, match="unknown preset"):
        build_run_config({"preset": "nope", "sequence": "seq", "output_dir": "o"},
                         base_dir=workdir)


def test_builtin_run_never_loads_model_runtime(workdir):
    cfg = write_config(workdir / "short.yaml", preset="baseline-tum", sequence="seq",
                       output_dir="out_short", max_frames=3, intrinsics=K_YAML)
    code = ("import sys; from selmvo.cli import main; rc = main(['run', %r]); "
            "print(rc, 'selmvo.model_runtime' in sys.modules, 'onnxruntime' in sys.modules)"
            % str(cfg))
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True)
    assert out.stdout.split()[-3:] == ["0", "False", "False"]


def test_missing_models_fall_back_to_builtin(workdir, monkeypatch):
    monkeypatch.setenv("SELMVO_MODEL_ROOT", str(workdir / "no-models"))
    cfg = write_config(workdir / "selm.yaml", preset="selm", sequence="seq",
                       output_dir="out_selm", max_frames=3, intrinsics=K_YAML)
    assert main(["run", str(cfg)]) == 0
    meta = json.loads((workdir / "out_selm" / "run.json").read_text())
    assert (meta["extractor"], meta["matcher"]) == ("builtin", "builtin")
    assert len(meta["notices"]) == 2
    assert meta["config"]["tracker"]["mode"] == "selm"


# ---------------------------------------------------------------- evaluate


def _traj(positions, t0=0.0):
    return [(t0 + i / 30, Pose.from_rt(np.eye(3), p)) for i, p in enumerate(positions)]


def test_evaluate_identical_is_zero(tmp_path, capsys):
    rng = np.random.default_rng(1)
    write_trajectory(tmp_path / "gt.txt", _traj(rng.normal(size=(20, 3))))
    assert main(["evaluate", str(tmp_path / "gt.txt"), str(tmp_path / "gt.txt")]) == 0
    assert "rmse 0.000" in capsys.readouterr().out


def test_evaluate_matches_oracle(tmp_path, capsys):
    rng = np.random.default_rng(2)
    gt = rng.normal(size=(30, 3))
    T = random_pose(rng)
    est = (gt + rng.normal(0, 0.02, gt.shape)) @ T.R.T + T.translation
    write_trajectory(tmp_path / "gt.txt", _traj(gt))
    write_trajectory(tmp_path / "est.txt", _traj(est))
    plot = tmp_path / "p.svg"
    assert main(["evaluate", str(tmp_path / "est.txt"), str(tmp_path / "gt.txt"),
                 "--json", "--plot", str(plot)]) == 0
    got = json.loads(capsys.readouterr().out)
    # the oracle sees the positions as written to disk
    e = [p.translation for _, p in read_trajectory(tmp_path / "est.txt")]
    g = [p.translation for _, p in read_trajectory(tmp_path / "gt.txt")]
    ref = ate_stats_reference(e, g)
    for key, value in zip(("rmse", "mean", "median", "sd"), ref):
        assert got[key] == pytest.approx(value, abs=1e-9)
    assert plot.read_text().startswith("<svg")


def test_evaluate_malformed_line_7(tmp_path, capsys):
    write_trajectory(tmp_path / "gt.txt", _traj(np.random.default_rng(3).normal(size=(10, 3))))
    lines = (tmp_path / "gt.txt").read_text().splitlines()
    lines[6] = "0.2 1 2 three 0 0 0 1"
    (tmp_path / "bad.txt").write_text("\n".join(lines) + "\n")
    assert main(["evaluate", str(tmp_path / "bad.txt"), str(tmp_path / "gt.txt")]) == 1
    assert "line 7" in capsys.readouterr().err


# ---------------------------------------------------------------- compare


def test_compare_table4_averages(tmp_path, capsys):
    manifest = {
        "layout": "systems",
        "sequences": [{"name": s, "results": {sys_: vals[s] for sys_, (vals, _) in TABLE4.items()}}
                      for s in ("P037", "P038")],
        "systems": list(TABLE4),
    }
    path = write_config(tmp_path / "m.yaml", **manifest)
    assert main(["compare", str(path), "--csv", str(tmp_path / "t.csv")]) == 0
    out = capsys.readouterr().out
    row = next(line for line in out.splitlines() if line.startswith("ORB-SLAM3 1000F"))
    assert row.split()[-1] == "3.861"
    csv_rows = (tmp_path / "t.csv").read_text().splitlines()
    assert csv_rows[0] == "system,P037,P038,Avg."
    assert len(csv_rows) == 1 + len(TABLE4)


def test_compare_failed_run_is_x_and_full_boost(tmp_path, capsys):
    seqs = []
    for name, (base, cand, _) in TABLE1.items():
        stats = lambda v: None if v is None else dict(zip(("rmse", "mean", "median", "sd"), v))  # noqa: E731
        seqs.append({"name": name, "results": {"orb": stats(base), "selm": stats(cand)}})
    path = write_config(tmp_path / "m.yaml", baseline="orb", candidate="selm", sequences=seqs)
    assert main(["compare", str(path)]) == 0
    out = capsys.readouterr().out
    floor = next(line for line in out.splitlines() if line.startswith("floor"))
    cells = floor.split()
    assert cells[1:5] == ["x"] * 4 and cells[-1] == "100.00"
    desk2 = next(line for line in out.splitlines() if line.startswith("desk2"))
    assert desk2.split()[-1] == "95.93"


def test_compare_from_trajectory_files(tmp_path, capsys):
    rng = np.random.default_rng(4)
    gt = rng.normal(size=(20, 3))
    write_trajectory(tmp_path / "gt.txt", _traj(gt))
    write_trajectory(tmp_path / "a.txt", _traj(gt + rng.normal(0, 0.05, gt.shape)))
    write_trajectory(tmp_path / "b.txt", _traj(gt + rng.normal(0, 0.01, gt.shape)))
    path = write_config(tmp_path / "m.yaml", baseline="a", candidate="b", sequences=[
        {"name": "s1", "groundtruth": "gt.txt", "results": {"a": "a.txt", "b": "b.txt"}},
        {"name": "s2", "groundtruth": "gt.txt", "results": {"a": "a.txt", "b": "missing.txt"}},
    ])
    assert main(["compare", str(path)]) == 0
    s2 = next(line for line in capsys.readouterr().out.splitlines() if line.startswith("s2"))
    assert s2.split()[5:9] == ["x"] * 4


def test_compare_empty_manifest_exits_1(tmp_path):
    path = write_config(tmp_path / "m.yaml", sequences=[])
    assert main(["compare", str(path)]) == 1


# ---------------------------------------------------------------- convert-tartanair


@pytest.fixture
def tartanair_dir(tmp_path):
    frames = render_plane_sequence(10, k=TARTANAIR)
    origin = ned_to_camera(Pose.from_rt(np.eye(3), [7.0, -30.0, 3.0]))  # NED start
    return write_tartanair_fixture(tmp_path / "P001", frames, origin)


def test_convert_tartanair_reports(tartanair_dir, tmp_path, capsys):
    out = tmp_path / "conv"
    assert main(["convert-tartanair", str(tartanair_dir), str(out)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["frame_count"] == 10 and report["quaternion_order"] == "xyzw"
    assert json.loads((out / "conversion_report.json").read_text()) == report


def test_convert_tartanair_count_mismatch(tartanair_dir, tmp_path, capsys):
    next((tartanair_dir / "image_left").glob("*.png")).unlink()
    assert main(["convert-tartanair", str(tartanair_dir), str(tmp_path / "conv")]) == 1
    assert "FrameCountMismatch" in capsys.readouterr().err


def test_converted_tartanair_runs(tartanair_dir, tmp_path):
    conv = tmp_path / "conv"
    assert main(["convert-tartanair", str(tartanair_dir), str(conv)]) == 0
    cfg = write_config(tmp_path / "run.yaml", preset="baseline-1000f",
                       dataset_kind="tartanair-converted", sequence="conv", output_dir="out")
    assert main(["run", str(cfg)]) == 0
    assert len(read_trajectory(tmp_path / "out" / "trajectory.txt")) == 10
    meta = json.loads((tmp_path / "out" / "run.json").read_text())
    assert meta["config"]["intrinsics"]["fx"] == TARTANAIR.fx
    assert meta["ate"]["rmse"] < 0.01
