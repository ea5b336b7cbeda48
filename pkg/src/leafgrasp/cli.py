"""``leafgrasp`` command line: gen-scene, perceive, run, metrics, export.

Exit codes: 0 success, 2 usage or configuration error, 3 malformed input,
4 internal failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .errors import ConfigError, InvalidParams, LeafGraspError, MalformedInput
from .geometry import DEFAULT_INTRINSICS, CameraIntrinsics, Transform, transform_point
from .kinematics import ArmModel, default_arm
from .perception import Observation, perceive_report
from .planning import PlannerConfig
from .scenegen import NOISE_PRESETS, Scene, gen_batch, render
from .workflow import (METRIC_COLUMNS, BatchRun, ExperimentSetting, GraspTolerance, SensorConfig,
                       derive_seed, generate_scenes, metrics_by_setting, process_scene)

logger = logging.getLogger("leafgrasp")

EXIT_OK, EXIT_USAGE, EXIT_MALFORMED, EXIT_INTERNAL = 0, 2, 3, 4
PRESETS = tuple(NOISE_PRESETS)


class UsageError(LeafGraspError):
    pass


# ---------------------------------------------------------------- render directories

def write_render_dir(out: Path, scene: Scene, preset: str, K: CameraIntrinsics = DEFAULT_INTRINSICS) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    obs, masks, records = render(scene, K, NOISE_PRESETS[preset])
    doc = scene.to_json()
    doc["noise_preset"] = preset
    io.write_json(out / "scene.json", doc)
    io.write_json(out / "intrinsics.json", K.to_json())
    io.write_json(out / "gt.json", [r.to_json() for r in records])
    io.write_depth(out / "depth.dpth", obs.depth)
    files = [out / "scene.json", out / "intrinsics.json", out / "gt.json", out / "depth.dpth"]
    for i, m in enumerate(masks):
        io.write_pbm(out / f"mask_{i:02d}.pbm", m)
        files.append(out / f"mask_{i:02d}.pbm")
    return files


def read_render_dir(in_dir: Path) -> tuple[Observation, list[np.ndarray], CameraIntrinsics]:
    if not in_dir.is_dir():
        raise FileNotFoundError(f"{in_dir} is not a directory")
    try:
        K = CameraIntrinsics.from_json(io.read_json(in_dir / "intrinsics.json"))
    except (KeyError, TypeError, InvalidParams) as exc:
        raise MalformedInput(f"intrinsics.json: {exc}") from exc
    depth = io.read_depth(in_dir / "depth.dpth")
    masks = [io.read_pbm(p) for p in sorted(in_dir.glob("mask_*.pbm"))]
    for m in masks:
        if m.shape != depth.shape:
            raise MalformedInput(f"mask shape {m.shape} does not match depth {depth.shape}")
    if depth.shape != (K.height, K.width):
        raise MalformedInput(f"depth {depth.shape} does not match intrinsics {(K.height, K.width)}")
    return Observation(np.zeros(depth.shape + (3,), np.uint8), depth, K), masks, K


def _load_scene(path: Path) -> tuple[Scene, str | None]:
    doc = io.read_json(path)
    try:
        return Scene.from_json(doc), doc.get("noise_preset")
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedInput(f"{path}: {exc}") from exc


# ---------------------------------------------------------------- run configuration

@dataclass
class RunConfig:
    settings: list[ExperimentSetting] = field(default_factory=list)
    scene_files: list[Path] = field(default_factory=list)
    scene_preset: str = "lab"
    arm: ArmModel = field(default_factory=default_arm)
    arm_file: str | None = None
    extrinsic: Transform | None = None
    planner: PlannerConfig = PlannerConfig()
    grasp_tol: GraspTolerance = GraspTolerance()
    seed: int = 0

    def to_json(self) -> dict:
        return {
            "settings": [s.to_json() for s in self.settings],
            "scene_files": [str(p) for p in self.scene_files],
            "scene_preset": self.scene_preset, "arm_file": self.arm_file,
            "extrinsic": None if self.extrinsic is None else self.extrinsic.to_json(),
            "planner": self.planner.to_json(), "grasp_tol": self.grasp_tol.to_json(), "seed": self.seed,
        }


def load_config(args) -> RunConfig:
    doc: dict = {}
    base = Path(".")
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            doc = io.read_json(path)
        except MalformedInput as exc:
            raise ConfigError(str(exc)) from exc
        base = path.parent
    if not isinstance(doc, dict):
        raise ConfigError("manifest must be a JSON object")
    try:
        cfg = RunConfig(seed=int(doc.get("seed", 0)))
        if args.seed is not None:
            cfg.seed = args.seed
        if doc.get("arm_file"):
            arm_path = base / doc["arm_file"]
            if not arm_path.is_file():
                raise ConfigError(f"arm file {arm_path} not found")
            cfg.arm = ArmModel.from_json(io.read_json(arm_path))
            cfg.arm_file = str(doc["arm_file"])
        if doc.get("extrinsic"):
            cfg.extrinsic = Transform.from_json(doc["extrinsic"])
        if doc.get("planner"):
            cfg.planner = PlannerConfig.from_json(doc["planner"])
        if doc.get("grasp_tol"):
            cfg.grasp_tol = GraspTolerance(**{k: float(v) for k, v in doc["grasp_tol"].items()})
        cfg.scene_preset = args.preset or doc.get("noise_preset", "lab")
        cfg.scene_files = [base / p for p in doc.get("scene_files", [])]
        settings = [ExperimentSetting.from_json(s) for s in doc.get("settings", [])]
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError, MalformedInput) as exc:
        raise ConfigError(f"bad manifest: {exc}") from exc
    if not settings and not cfg.scene_files:
        preset = args.preset or "lab"
        settings = [ExperimentSetting(preset, preset, 10, (1, 3), 0.4 if preset == "field" else 0.0, cfg.seed)]
    elif args.seed is not None:
        settings = [ExperimentSetting(s.name, s.preset, s.scenes, s.n_leaves, s.occlusion, derive_seed(args.seed, i))
                    for i, s in enumerate(settings)]
    if args.scenes is not None:
        settings = [ExperimentSetting(s.name, s.preset, args.scenes, s.n_leaves, s.occlusion, s.seed) for s in settings]
    if args.preset is not None:
        settings = [ExperimentSetting(s.name, args.preset, s.scenes, s.n_leaves, s.occlusion, s.seed) for s in settings]
    for s in settings:
        if s.preset not in NOISE_PRESETS:
            raise ConfigError(f"unknown noise preset {s.preset!r}")
        if s.n_leaves[0] < 1 or s.n_leaves[1] < s.n_leaves[0]:
            raise ConfigError(f"setting {s.name}: bad n_leaves {s.n_leaves}")
        if s.scenes < 1:
            raise ConfigError(f"setting {s.name}: scenes must be positive")
    if cfg.scene_preset not in NOISE_PRESETS:
        raise ConfigError(f"unknown noise preset {cfg.scene_preset!r}")
    cfg.settings = settings
    return cfg


# ---------------------------------------------------------------- outputs

def results_doc(runs: list[BatchRun], cfg: RunConfig | None = None) -> dict:
    return {"config": None if cfg is None else cfg.to_json(), "runs": [r.to_json() for r in runs]}


def load_results(path: Path) -> list[BatchRun]:
    doc = io.read_json(path)
    try:
        return [BatchRun.from_json(r) for r in doc["runs"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedInput(f"{path}: {exc}") from exc


def write_metrics(out: Path, runs: list[BatchRun], figures: bool = True) -> list[Path]:
    reports = metrics_by_setting(runs)
    rows = [[io.fmt(rep.row()[c]) for c in METRIC_COLUMNS] for rep in reports]
    io.write_csv(out / "metrics.csv", METRIC_COLUMNS, rows)
    files = [out / "metrics.csv"]
    if figures:
        from .report import plot_lpb

        files.append(plot_lpb(reports, out / "lpb.png"))
    return files


def write_spectra(out: Path, runs: list[BatchRun], figures: bool = True) -> list[Path]:
    rows, wl = [], None
    for run in runs:
        for rec in run.approaches:
            if rec.spectrum is not None:
                wl = rec.spectrum.wavelengths if wl is None else wl
                rows.append([f"{run.scene_id}/{rec.leaf_id}"] + [f"{v:.6f}" for v in rec.spectrum.values])
    wl = SensorConfig().wavelengths if wl is None else wl
    io.write_csv(out / "spectra.csv", ["leaf_id"] + [f"{w:g}" for w in wl], rows)
    files = [out / "spectra.csv"]
    if figures:
        from .report import plot_spectra

        files.append(plot_spectra(runs, out / "spectra.png"))
    return files


# ---------------------------------------------------------------- commands

def cmd_gen_scene(args) -> int:
    n = args.n_leaves
    if n < 1:
        raise UsageError("--n-leaves must be at least 1")
    if not 0.0 <= args.occlusion <= 1.0:
        raise UsageError("--occlusion must lie in [0, 1]")
    seed = 0 if args.seed is None else args.seed
    preset = args.preset or "lab"
    out = Path(args.out or "scene")
    if args.scenes and args.scenes > 1:
        for i in range(args.scenes):
            scene = gen_batch(derive_seed(seed, i), n, args.occlusion, scene_id=f"scene-{i:03d}")
            write_render_dir(out / f"scene_{i:03d}", scene, preset)
    else:
        scene = gen_batch(seed, n, args.occlusion, scene_id=f"scene-{seed}")
        write_render_dir(out, scene, preset)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_perceive(args) -> int:
    in_dir = Path(args.in_dir)
    obs, masks, K = read_render_dir(in_dir)
    report = perceive_report(obs, masks, K)
    out = Path(args.out) if args.out else in_dir / "posesets.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_json(out, [ps.to_json() for ps in report.posesets])
    for leaf_id, reason in report.dropped:
        print(f"dropped leaf {leaf_id}: {reason}", file=sys.stderr)
    if not args.no_figures:
        from .report import plot_detections

        plot_detections(obs.depth, report.posesets, K, out.with_name("detections.png"))
    print(f"{len(report.posesets)} pose sets, {len(report.dropped)} dropped -> {out}")
    return EXIT_OK


def _run_all(cfg: RunConfig, log) -> list[BatchRun]:
    runs = []
    jobs: list[tuple[Scene, str, str, int]] = []
    for i, path in enumerate(cfg.scene_files):
        scene_path = path / "scene.json" if path.is_dir() else path
        if not scene_path.is_file():
            raise ConfigError(f"scene file {scene_path} not found")
        scene, preset = _load_scene(scene_path)
        jobs.append((scene, preset or cfg.scene_preset, "scenes", derive_seed(cfg.seed, i, 7)))
    for s in cfg.settings:
        for i, scene in enumerate(generate_scenes(s)):
            jobs.append((scene, s.preset, s.name, derive_seed(s.seed, i, 7)))
    for scene, preset, setting, seed in jobs:
        run, _ = process_scene(scene, cfg.arm, preset, cfg.planner, cfg.grasp_tol, extrinsic=cfg.extrinsic,
                               seed=seed, setting=setting)
        log.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {run.scene_id} setting={setting} "
                  f"approaches={run.n_approaches} grasped={run.n_successes} wall_time={run.wall_time:.3f}s\n")
        logger.info("%s: %d approaches, %d grasped", run.scene_id, run.n_approaches, run.n_successes)
        runs.append(run)
    return runs


def cmd_run(args) -> int:
    cfg = load_config(args)
    out = Path(args.out or "results")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "run.log", "w") as log:
        t0 = time.perf_counter()
        runs = _run_all(cfg, log)
        log.write(f"total wall_time={time.perf_counter() - t0:.3f}s\n")
    if not runs:
        raise ConfigError("configuration produced no scenes")
    io.write_json(out / "results.json", results_doc(runs, cfg))
    write_metrics(out, runs, not args.no_figures)
    write_spectra(out, runs, not args.no_figures)
    for rep in metrics_by_setting(runs):
        s = rep.success
        print(f"{rep.setting}: {rep.total_approaches} approaches, grasp rate "
              f"{rep.grasp_rate if rep.grasp_rate is None else round(rep.grasp_rate, 1)}%, "
              f"LPB success {[None if s[k] is None else round(s[k], 1) for k in (1, 2, 3)]}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    runs = load_results(Path(args.results))
    if not runs:
        raise MalformedInput("results file holds no runs")
    out = Path(args.out or Path(args.results).parent)
    out.mkdir(parents=True, exist_ok=True)
    for p in write_metrics(out, runs, not args.no_figures):
        print(p)
    return EXIT_OK


_LEAF_COLORS = np.array([[46, 160, 67], [31, 119, 180], [214, 39, 40], [255, 127, 14],
                         [148, 103, 189], [140, 86, 75], [227, 119, 194], [188, 189, 34]], dtype=np.uint8)
_AXIS_COLORS = np.array([[255, 0, 0], [255, 0, 0], [0, 255, 0], [0, 255, 0], [0, 0, 255], [0, 0, 255]],
                        dtype=np.uint8)


def export_ply(runs: list[BatchRun], path: Path, axis_len: float = 0.03) -> tuple[int, int]:
    """Filtered leaf clouds plus pose-1 axes, all in the robot base frame.

    Clouds are recomputed by re-rendering each stored scene with its preset;
    rendering is seeded by the scene so this reproduces the run's input.
    """
    verts, cols, edges = [], [], []
    n = 0
    for run in runs:
        if run.scene is None:
            continue
        obs, masks, _ = render(run.scene, DEFAULT_INTRINSICS, NOISE_PRESETS[run.preset or "none"])
        report = perceive_report(obs, masks)
        ext = run.scene.extrinsic
        for ps in report.posesets:
            pts = transform_point(ext, report.clouds[ps.leaf_id].points)
            verts.append(pts)
            cols.append(np.repeat(_LEAF_COLORS[ps.leaf_id % len(_LEAF_COLORS)][None], len(pts), axis=0))
            n += len(pts)
            frame = report.frames[ps.leaf_id]
            axes = []
            for d in (frame.tangent, frame.bitangent, frame.normal):
                axes += [frame.center, frame.center + axis_len * d]
            verts.append(transform_point(ext, np.array(axes)))
            cols.append(_AXIS_COLORS)
            edges += [(n, n + 1), (n + 2, n + 3), (n + 4, n + 5)]
            n += 6
    V = np.vstack(verts) if verts else np.zeros((0, 3))
    C = np.vstack(cols) if cols else np.zeros((0, 3), np.uint8)
    io.write_ply(path, V, C, np.array(edges, dtype=int).reshape(-1, 2))
    return len(V), len(edges)


def export_paths_csv(runs: list[BatchRun], path: Path) -> int:
    dof = max((r.path.shape[1] for run in runs for r in run.approaches if r.path is not None), default=6)
    header = ["scene_id", "leaf_id", "pose_index", "waypoint"] + [f"q{j + 1}" for j in range(dof)]
    rows = []
    for run in runs:
        for rec in run.approaches:
            if rec.path is None:
                continue
            for k, q in enumerate(rec.path):
                rows.append([run.scene_id, rec.leaf_id, rec.pose_index, k] + [f"{x:.9f}" for x in q])
    io.write_csv(path, header, rows)
    return len(rows)


def cmd_export(args) -> int:
    runs = load_results(Path(args.results))
    out = Path(args.out or Path(args.results).parent)
    out.mkdir(parents=True, exist_ok=True)
    if args.format == "ply":
        nv, ne = export_ply(runs, out / "leaves.ply")
        print(f"{out / 'leaves.ply'}: {nv} vertices, {ne} edges")
    else:
        n = export_paths_csv(runs, out / "paths.csv")
        print(f"{out / 'paths.csv'}: {n} waypoints")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="base random seed")
    common.add_argument("--preset", choices=PRESETS, default=None, help="sensor noise preset")
    common.add_argument("--scenes", type=int, default=None, help="number of scenes/batches")
    common.add_argument("--out", default=None, help="output directory (or file for perceive)")
    common.add_argument("--config", default=None, help="JSON run manifest")
    common.add_argument("--no-figures", action="store_true", help="skip PNG figures")

    p = _Parser(prog="leafgrasp", description="Leaf pose estimation and grasp planning simulator.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    g = sub.add_parser("gen-scene", parents=[common], help="generate and render a synthetic batch")
    g.add_argument("--n-leaves", type=int, default=3)
    g.add_argument("--occlusion", type=float, default=0.0)
    g.set_defaults(func=cmd_gen_scene)
    pc = sub.add_parser("perceive", parents=[common], help="estimate leaf poses from a render directory")
    pc.add_argument("in_dir")
    pc.set_defaults(func=cmd_perceive)
    r = sub.add_parser("run", parents=[common], help="perceive, plan and grasp over many batches")
    r.set_defaults(func=cmd_run)
    m = sub.add_parser("metrics", parents=[common], help="recompute metrics.csv from results.json")
    m.add_argument("results")
    m.set_defaults(func=cmd_metrics)
    e = sub.add_parser("export", parents=[common], help="export clouds (ply) or paths (csv)")
    e.add_argument("results")
    e.add_argument("--format", choices=("ply", "csv"), default="ply")
    e.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    level = os.environ.get("LEAFGRASP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MalformedInput as exc:
        print(f"malformed input: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    except Exception as exc:  # noqa: BLE001
        logger.debug("internal failure", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
