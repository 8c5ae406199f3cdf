"""Command line entry point: run, evaluate, compare, convert-tartanair.

Exit codes: 0 success, 2 sequence completed with tracking loss, 1 error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

from . import __version__
from .dataset import (
    DEFAULT_MAX_DIFFERENCE, convert_tartanair, load_tum_sequence, read_trajectory,
    sequence_ground_truth, write_trajectory,
)
from .errors import ConfigError, SelmError
from .evaluation import (
    ATEStats, ComparisonRow, FAILED, compute_ate, format_stats, plot_trajectory, render_csv,
    render_text, row_means, summarize_grid, summarize_table,
)
from .frontend import BuiltinExtractor, ExtractorConfig
from .geometry import ICL_NUIM, TARTANAIR, TUM_FR1, Intrinsics
from .matcher import DEFAULT_MIN_CONFIDENCE, DEFAULT_RATIO, BuiltinMatcher
from .tracker import Tracker, TrackerConfig, telemetry_lines
from .worldmap import export_map_points

log = logging.getLogger("selmvo")

EXIT_OK, EXIT_ERROR, EXIT_LOST = 0, 1, 2
MODEL_ROOT_ENV = "SELMVO_MODEL_ROOT"
DATASET_KINDS = {"tum": TUM_FR1, "icl": ICL_NUIM, "tartanair-converted": TARTANAIR}
NAMED_INTRINSICS = {"tum-fr1": TUM_FR1, "icl-nuim": ICL_NUIM, "tartanair": TARTANAIR}
BUILTIN = "builtin"


# --------------------------------------------------------------------------- config


@dataclass
class MatcherSettings:
    implementation: str = BUILTIN
    ratio: float = DEFAULT_RATIO
    min_confidence: float = DEFAULT_MIN_CONFIDENCE


@dataclass
class RunConfig:
    sequence: Path
    output_dir: Path
    dataset_kind: str = "tum"
    intrinsics: Intrinsics = TUM_FR1
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    extractor_implementation: str = BUILTIN
    matcher: MatcherSettings = field(default_factory=MatcherSettings)
    seed: int = 0
    max_difference: float = DEFAULT_MAX_DIFFERENCE
    max_frames: Optional[int] = None
    device: str = "cpu"
    preset: Optional[str] = None

    def as_dict(self):
        ex = self.extractor.as_dict()
        ex["implementation"] = self.extractor_implementation
        return {
            "preset": self.preset,
            "dataset_kind": self.dataset_kind,
            "sequence": str(self.sequence),
            "output_dir": str(self.output_dir),
            "seed": self.seed,
            "max_difference": self.max_difference,
            "max_frames": self.max_frames,
            "device": self.device,
            "intrinsics": self.intrinsics.to_dict(),
            "tracker": self.tracker.as_dict(),
            "extractor": ex,
            "matcher": asdict(self.matcher),
        }


TOP_KEYS = {"preset", "dataset_kind", "sequence", "output_dir", "seed", "max_difference",
            "max_frames", "device", "intrinsics", "tracker", "extractor", "matcher"}


def _key_lines(node, prefix="", out=None):
    """Map dotted keys of a composed YAML mapping to 1-based line numbers."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = f"{prefix}{k.value}"
            out[key] = k.start_mark.line + 1
            _key_lines(v, key + ".", out)
    return out


def read_yaml(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e}") from e
    try:
        data = yaml.safe_load(text) or {}
        lines = _key_lines(yaml.compose(text))
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark else str(path)
        raise ConfigError(f"{where}: invalid YAML: {getattr(e, 'problem', e)}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}:1: config must be a mapping")
    return data, lines


def preset_names():
    return sorted(p.name[:-5] for p in resources.files("selmvo").joinpath("presets").iterdir()
                  if p.name.endswith(".yaml"))


def load_preset(name, _seen=()):
    """Preset mapping with its own ``preset:`` parent merged underneath."""
    if name not in preset_names():
        raise ConfigError(f"unknown preset {name!r} (available: {', '.join(preset_names())})")
    if name in _seen:
        raise ConfigError(f"preset cycle through {name!r}")
    data = yaml.safe_load(resources.files("selmvo").joinpath("presets", f"{name}.yaml").read_text())
    parent = data.pop("preset", None)
    if parent:
        data = deep_merge(load_preset(parent, _seen + (name,)), data)
    return data


def deep_merge(base, over):
    out = dict(base)
    for k, v in over.items():
        out[k] = deep_merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


class _Fields:
    """Field-level error reporting with the config line of each key."""

    def __init__(self, path, lines):
        self.path, self.lines = path, lines

    def error(self, key, msg):
        line = self.lines.get(key)
        where = f"{self.path}:{line}" if line else str(self.path)
        return ConfigError(f"{where}: field '{key}': {msg}")

    def build(self, cls, data, section, skip=()):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise self.error(section, "must be a mapping")
        known = {f.name for f in fields(cls)}
        for k in data:
            if k not in known and k not in skip:
                raise self.error(f"{section}.{k}", f"unknown field (known: {', '.join(sorted(known))})")
        kwargs = {k: v for k, v in data.items() if k not in skip}
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as e:
            key = next((f"{section}.{k}" for k in kwargs if k in str(e)), section)
            raise self.error(key, str(e)) from None


def _resolve(path, base: Path):
    p = Path(os.path.expanduser(str(path)))
    return p if p.is_absolute() else base / p


def build_run_config(data, lines=None, source="<config>", base_dir=Path(".")) -> RunConfig:
    """Validate a config mapping (preset merged underneath) into a RunConfig."""
    lines = lines or {}
    f = _Fields(source, lines)
    preset = data.get("preset")
    if preset is not None:
        try:
            data = deep_merge(load_preset(preset), data)
        except ConfigError as e:
            raise f.error("preset", str(e)) from None
    for k in data:
        if k not in TOP_KEYS:
            raise f.error(k, f"unknown field (known: {', '.join(sorted(TOP_KEYS))})")
    for k in ("sequence", "output_dir"):
        if not data.get(k):
            raise f.error(k, "is required")
    kind = data.get("dataset_kind", "tum")
    if kind not in DATASET_KINDS:
        raise f.error("dataset_kind", f"must be one of {', '.join(DATASET_KINDS)}")
    k = data.get("intrinsics")
    if k is None:
        intr = DATASET_KINDS[kind]
    elif isinstance(k, str):
        if k not in NAMED_INTRINSICS:
            raise f.error("intrinsics", f"unknown calibration {k!r} "
                                        f"(known: {', '.join(NAMED_INTRINSICS)})")
        intr = NAMED_INTRINSICS[k]
    else:
        intr = f.build(Intrinsics, k, "intrinsics")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise f.error("seed", "must be an integer")
    tr = dict(data.get("tracker") or {})
    tr.setdefault("seed", seed)
    tracker = f.build(TrackerConfig, tr, "tracker")
    ex_data = dict(data.get("extractor") or {})
    ex_impl = str(ex_data.pop("implementation", BUILTIN))
    extractor = f.build(ExtractorConfig, ex_data, "extractor")
    matcher = f.build(MatcherSettings, data.get("matcher"), "matcher")
    device = data.get("device", "cpu")
    if device not in ("cpu", "gpu"):
        raise f.error("device", "must be cpu or gpu")
    max_frames = data.get("max_frames")
    if max_frames is not None and (not isinstance(max_frames, int) or max_frames < 1):
        raise f.error("max_frames", "must be a positive integer")
    sequence = _resolve(data["sequence"], base_dir)
    if not sequence.is_dir():
        raise f.error("sequence", f"directory {sequence} does not exist")
    return RunConfig(sequence, _resolve(data["output_dir"], base_dir), kind, intr, tracker,
                     extractor, ex_impl, matcher, seed,
                     float(data.get("max_difference", DEFAULT_MAX_DIFFERENCE)), max_frames, device,
                     preset)


def load_run_config(path, overrides=None) -> RunConfig:
    path = Path(path)
    data, lines = read_yaml(path)
    data = deep_merge(data, overrides or {})
    return build_run_config(data, lines, str(path), path.parent)


# --------------------------------------------------------------------------- components


def _model_path(impl, base_dir):
    root = os.environ.get(MODEL_ROOT_ENV)
    p = Path(impl)
    candidates = [p] if p.is_absolute() else (
        [Path(root) / p] if root else []) + [base_dir / p, p]
    return next((c for c in candidates if c.is_file()), None)


def build_components(cfg: RunConfig, base_dir=Path(".")):
    """Extractor, matcher and model metadata; missing model files fall back to builtin."""
    models, notices = {}, []
    extractor, matcher = BuiltinExtractor(cfg.extractor), None
    builtin_matcher = BuiltinMatcher(cfg.matcher.ratio, cfg.matcher.min_confidence)
    wanted = {"extractor": cfg.extractor_implementation, "matcher": cfg.matcher.implementation}
    for kind, impl in wanted.items():
        if impl == BUILTIN:
            continue
        path = _model_path(impl, base_dir)
        if path is None:
            msg = f"{kind} model {impl!r} not found (set ${MODEL_ROOT_ENV}); using builtin {kind}"
            log.warning(msg)
            notices.append(msg)
            continue
        from . import model_runtime  # only runs that ask for models touch the runtime
        h = model_runtime.load_model(path, kind, cfg.device)
        models[kind] = h.metadata()
        if kind == "extractor":
            extractor = model_runtime.LearnedExtractor(h, cfg.extractor)
        else:
            matcher = model_runtime.LearnedMatcher(h, cfg.matcher.min_confidence)
    return extractor, matcher or builtin_matcher, models, notices


def git_describe():
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


# --------------------------------------------------------------------------- commands


def cmd_run(config_path, overrides=None) -> int:
    """Track one sequence; write trajectory, telemetry, metadata, map and plot."""
    cfg = load_run_config(config_path, overrides)
    base_dir = Path(config_path).parent
    extractor, matcher, models, notices = build_components(cfg, base_dir)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    frames = load_tum_sequence(cfg.sequence, cfg.intrinsics, cfg.max_difference)
    if cfg.max_frames:
        frames = (f for i, f in zip(range(cfg.max_frames), frames))
    tracker = Tracker(cfg.intrinsics, cfg.tracker, extractor, matcher)
    traj, telemetry = tracker.run(frames)
    # stopped early or dropped frames along the way: completed with tracking loss
    lost = tracker.lost or any(r.status == "lost" for r in telemetry)
    write_trajectory(out / "trajectory.txt", traj)
    (out / "telemetry.jsonl").write_text(telemetry_lines(telemetry))
    if tracker.world is not None:
        export_map_points(tracker.world, out / "map.txt")
    gt = sequence_ground_truth(cfg.sequence)
    if gt:
        shutil.copyfile(cfg.sequence / "groundtruth.txt", out / "groundtruth.txt")
    plot_trajectory(traj, gt, out / "trajectory.svg", cfg.max_difference,
                    title=f"{cfg.sequence.name} ({cfg.tracker.mode})")
    status = "lost" if lost else "ok"
    meta = {
        "selmvo_version": __version__,
        "git_describe": git_describe(),
        "config": cfg.as_dict(),
        "extractor": extractor.name,
        "matcher": matcher.name,
        "models": models,
        "notices": notices,
        "status": status,
        "stopped_early": tracker.lost,
        "frames_lost": sum(r.status == "lost" for r in telemetry),
        "frames_processed": len(telemetry),
        "poses": len(traj),
        "keyframes": sum(r.keyframe_inserted for r in telemetry),
        "map_points": len(tracker.world.map_points) if tracker.world else 0,
    }
    if gt and len(traj) >= 3:
        try:
            meta["ate"] = compute_ate(traj, gt, cfg.max_difference).as_dict()
        except SelmError as e:
            meta["ate_error"] = str(e)
    (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"{cfg.sequence.name}: {len(traj)} poses from {len(telemetry)} frames, "
          f"{meta['keyframes']} keyframes, status {status}")
    if "ate" in meta:
        print(format_stats(ATEStats(**meta["ate"])))
    print(f"outputs in {out}")
    return EXIT_LOST if lost else EXIT_OK


def cmd_evaluate(est_path, gt_path, as_json=False, plot=None,
                 max_difference=DEFAULT_MAX_DIFFERENCE) -> int:
    est = read_trajectory(est_path)
    gt = read_trajectory(gt_path)
    stats = compute_ate(est, gt, max_difference)
    if as_json:
        print(json.dumps(stats.as_dict(), sort_keys=True))
    else:
        print(format_stats(stats))
    if plot:
        plot_trajectory(est, gt, plot, max_difference, title=Path(est_path).name)
    return EXIT_OK


def _manifest_entry(entry, gt, base, max_difference, where):
    """ATEStats for one manifest cell: a trajectory path, a number, a stats
    mapping, or null/"x" for a failed run (None)."""
    if entry is None or entry == FAILED:
        return None
    if isinstance(entry, (int, float)) and not isinstance(entry, bool):
        return ATEStats(float(entry))
    if isinstance(entry, dict):
        try:
            return ATEStats(**entry)
        except TypeError as e:
            raise ConfigError(f"{where}: {e}") from None
    path = _resolve(entry, base)
    if not path.is_file():
        log.warning("%s: %s missing, shown as %s", where, path, FAILED)
        return None
    if gt is None:
        raise ConfigError(f"{where}: trajectory given but the sequence has no groundtruth")
    try:
        return compute_ate(read_trajectory(path), gt, max_difference)
    except SelmError as e:
        log.warning("%s: %s, shown as %s", where, e, FAILED)
        return None


def cmd_compare(manifest_path, csv_path=None) -> int:
    """Comparison table from a manifest of sequences x systems."""
    manifest_path = Path(manifest_path)
    data, lines = read_yaml(manifest_path)
    f = _Fields(manifest_path, lines)
    base = manifest_path.parent
    seqs = data.get("sequences") or []
    if not seqs:
        raise f.error("sequences", "manifest lists no sequences")
    maxd = float(data.get("max_difference", DEFAULT_MAX_DIFFERENCE))
    baseline, candidate = data.get("baseline"), data.get("candidate")
    systems = data.get("systems") or sorted({s for q in seqs for s in (q.get("results") or {})})
    if baseline and candidate:
        systems = [baseline, candidate]

    def evaluate(q):
        name = str(q.get("name", "?"))
        gt = _resolve(q["groundtruth"], base) if q.get("groundtruth") else None
        gt_traj = read_trajectory(gt) if gt is not None else None
        res = q.get("results") or {}
        return name, [_manifest_entry(res.get(s), gt_traj, base, maxd, f"{manifest_path}: {name}/{s}")
                      for s in systems]

    with ThreadPoolExecutor(max_workers=4) as pool:
        evaluated = list(pool.map(evaluate, seqs))

    title = data.get("title")
    if baseline and candidate:
        table = summarize_table([ComparisonRow(n, b, c) for n, (b, c) in evaluated])
        text, csv_text = render_text(table, title), render_csv(table)
    elif data.get("layout", "sequences") == "systems":
        # one row per system, one column per sequence, Avg. per row
        cols = [n for n, _ in evaluated]
        values = [[None if v[j] is None else v[j].rmse for _, v in evaluated]
                  for j in range(len(systems))]
        avgs = row_means(values)
        table = summarize_grid(systems, cols + ["Avg."], [v + [a] for v, a in zip(values, avgs)])
        text = render_text(table, title, first="System", average_row=False)
        csv_text = render_csv(table, "system", average_row=False)
    else:
        values = [[None if s is None else s.rmse for s in v] for _, v in evaluated]
        table = summarize_grid([n for n, _ in evaluated], systems, values)
        text, csv_text = render_text(table, title), render_csv(table)
    sys.stdout.write(text)
    if csv_path:
        Path(csv_path).write_text(csv_text)
    return EXIT_OK


def cmd_convert_tartanair(in_path, out_path, camera="left", depth_factor=5000.0,
                          quaternion_order=None) -> int:
    report = convert_tartanair(in_path, out_path, camera, depth_factor, quaternion_order)
    text = json.dumps(report.as_dict(), indent=2, sort_keys=True)
    (Path(out_path) / "conversion_report.json").write_text(text + "\n")
    print(text)
    return EXIT_OK


# --------------------------------------------------------------------------- main


def _parser():
    p = argparse.ArgumentParser(prog="selmvo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="track a TUM-layout sequence")
    r.add_argument("config", help="YAML run config (may name a preset)")
    r.add_argument("--preset", help="preset to merge underneath the config")
    r.add_argument("--sequence", help="override the sequence directory")
    r.add_argument("--output", help="override the output directory")
    r.add_argument("--seed", type=int)
    r.add_argument("--max-frames", type=int)

    e = sub.add_parser("evaluate", help="ATE of an estimated trajectory")
    e.add_argument("estimate")
    e.add_argument("groundtruth")
    e.add_argument("--json", action="store_true", help="print a JSON record")
    e.add_argument("--plot", metavar="OUT.svg")
    e.add_argument("--max-difference", type=float, default=DEFAULT_MAX_DIFFERENCE)

    c = sub.add_parser("compare", help="comparison table from a manifest")
    c.add_argument("manifest")
    c.add_argument("--csv", metavar="OUT.csv")

    t = sub.add_parser("convert-tartanair", help="TartanAir folder to TUM layout")
    t.add_argument("input")
    t.add_argument("output")
    t.add_argument("--camera", default="left", choices=["left", "right"])
    t.add_argument("--depth-factor", type=float, default=5000.0)
    t.add_argument("--quaternion-order", choices=["xyzw", "wxyz"],
                   help="override the order read from the pose file header")

    sub.add_parser("presets", help="list shipped presets")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            over = {}
            for key, val in (("preset", args.preset), ("sequence", args.sequence),
                             ("output_dir", args.output), ("seed", args.seed),
                             ("max_frames", args.max_frames)):
                if val is not None:
                    over[key] = str(Path(val).resolve()) if key in ("sequence", "output_dir") else val
            return cmd_run(args.config, over)
        if args.command == "evaluate":
            return cmd_evaluate(args.estimate, args.groundtruth, args.json, args.plot,
                                args.max_difference)
        if args.command == "compare":
            return cmd_compare(args.manifest, args.csv)
        if args.command == "convert-tartanair":
            return cmd_convert_tartanair(args.input, args.output, args.camera, args.depth_factor,
                                         args.quaternion_order)
        if args.command == "presets":
            print("\n".join(preset_names()))
            return EXIT_OK
    except (SelmError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
