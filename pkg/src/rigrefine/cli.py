"""Command-line entry point: simulate, refine, evaluate, expose.

Exit codes: 0 success, 2 bad input or config, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INPUT, EXIT_DIVERGED = 0, 2, 3
TOGGLES = ("intrinsics", "barrier", "precondition", "epipolar", "reproj")


class ConfigError(ValueError):
    pass


# --- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class NoiseConfig:
    rotation_deg: float = 0.5  # rotations limited to this; sigma = rotation_deg / 3
    device_trans_sigma: float = 0.0
    point_sigma: float = 0.0
    pixel_sigma: float = 0.0


@dataclass(frozen=True)
class MatchConfig:
    offsets: tuple = (1, 2, 3)
    max_per_set: int = 24
    min_matches: int = 8


@dataclass(frozen=True)
class PathsConfig:
    rig: str | None = None
    trajectory: str | None = None
    matches: str | None = None
    gt_trajectory: str | None = None
    gt_rig: str | None = None
    output: str | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int
    scene: object
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    matches: MatchConfig = field(default_factory=MatchConfig)
    refine: object = None
    paths: PathsConfig = field(default_factory=PathsConfig)


def load_config_file(path) -> dict:
    """TOML by default; JSON when the suffix is .json."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config: file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix.lower() == ".json":
            return json.loads(text)
        return tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"config: cannot parse {path}: {exc}") from exc


def _build(cls, data: dict, section: str, **extra):
    data = dict(data or {})
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{section}.{key}: unknown field")
    kwargs = {}
    for key, value in data.items():
        default = known[key].default
        if isinstance(default, tuple) or isinstance(value, list):
            value = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{section}.{key}: expected true/false, got {value!r}")
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or not float(value).is_integer():
                raise ConfigError(f"{section}.{key}: expected an integer, got {value!r}")
            value = int(value)
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{section}.{key}: expected a number, got {value!r}")
            value = float(value)
        kwargs[key] = value
    kwargs.update(extra)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        raise ConfigError(msg if msg.startswith(section) else f"{section}.{msg}") from exc


def build_run_config(data: dict) -> RunConfig:
    from .constraints import BarrierSpec
    from .optimizer import LossWeights, RefineConfig
    from .synthetic import SceneConfig

    data = dict(data)
    known = {"seed", "scene", "noise", "matches", "refine", "weights", "bounds", "toggles", "paths"}
    for key in data:
        if key not in known:
            raise ConfigError(f"{key}: unknown section")
    seed = data.get("seed")
    if seed is None:
        raise ConfigError("seed: required (set it in the config or pass --seed)")
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed: expected a non-negative integer, got {seed!r}")
    scene = _build(SceneConfig, data.get("scene"), "scene", seed=seed)
    noise = _build(NoiseConfig, data.get("noise"), "noise")
    for f in fields(noise):
        if getattr(noise, f.name) < 0:
            raise ConfigError(f"noise.{f.name}: must be >= 0")
    matches = _build(MatchConfig, data.get("matches"), "matches")
    if not matches.offsets or any(not 1 <= int(n) <= 3 for n in matches.offsets):
        raise ConfigError("matches.offsets: each offset must be 1, 2 or 3")
    weights = _build(LossWeights, data.get("weights"), "weights")
    bounds_data = data.get("bounds") or {}
    try:
        bounds = BarrierSpec({k: tuple(v) for k, v in bounds_data.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bounds.{exc}") from exc
    toggles = dict(data.get("toggles") or {})
    for key in toggles:
        if key not in TOGGLES:
            raise ConfigError(f"toggles.{key}: unknown toggle (expected one of {', '.join(TOGGLES)})")
        if not isinstance(toggles[key], bool):
            raise ConfigError(f"toggles.{key}: expected true/false")
    refine_data = dict(data.get("refine") or {})
    for key in ("weights", "bounds", "seed") + tuple(f"{t}_enabled" for t in TOGGLES) + ("intrinsics_learnable",):
        if key in refine_data:
            raise ConfigError(f"refine.{key}: set this in its own section")
    refine = _build(
        RefineConfig, refine_data, "refine", weights=weights, bounds=bounds, seed=seed,
        intrinsics_learnable=toggles.get("intrinsics", True),
        barrier_enabled=toggles.get("barrier", True),
        precondition_enabled=toggles.get("precondition", True),
        epipolar_enabled=toggles.get("epipolar", True),
        reproj_enabled=toggles.get("reproj", True),
    )
    paths = _build(PathsConfig, data.get("paths"), "paths")
    return RunConfig(seed, scene, noise, matches, refine, paths)


def _merge(base: dict, section: str, values: dict) -> None:
    values = {k: v for k, v in values.items() if v is not None}
    if values:
        base.setdefault(section, {})
        base[section] = {**base[section], **values}


def _config_from_args(args) -> dict:
    data = load_config_file(args.config) if getattr(args, "config", None) else {}
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    return data


def _require_file(path, name: str) -> Path:
    if path is None:
        raise ConfigError(f"paths.{name}: required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"paths.{name}: file not found: {p}")
    return p


def _write_json(path, data) -> None:
    Path(path).write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "tolist"):
        return obj.tolist()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


# --- commands --------------------------------------------------------------------


def cmd_simulate(args) -> int:
    from .geometry import save_matches
    from .rig import save_rig, save_trajectory
    from .synthetic import NoiseSpec, generate_scene, perturb, scene_to_dict, synthesize_matches

    data = _config_from_args(args)
    _merge(data, "scene", {"num_frames": args.frames, "num_cameras": args.cameras, "num_landmarks": args.landmarks})
    _merge(data, "noise", {"rotation_deg": args.noise_deg, "pixel_sigma": args.pixel_sigma})
    cfg = build_run_config(data)
    out = Path(args.out or cfg.paths.output or ".")
    out.mkdir(parents=True, exist_ok=True)

    scene = generate_scene(cfg.scene)
    noise = NoiseSpec.rotation_level(
        cfg.noise.rotation_deg, seed=cfg.seed + 1,
        device_trans_sigma=cfg.noise.device_trans_sigma, point_sigma=cfg.noise.point_sigma,
        pixel_sigma=cfg.noise.pixel_sigma,
    )
    noisy = perturb(scene, noise)
    match_sets = synthesize_matches(
        scene, cfg.matches.offsets, pixel_sigma=cfg.noise.pixel_sigma, seed=cfg.seed + 2,
        max_per_set=cfg.matches.max_per_set, min_matches=cfg.matches.min_matches,
    )
    save_rig(noisy.rig, out / "rig.json")
    save_trajectory(scene.trajectory, out / "trajectory_gt.txt")
    save_trajectory(noisy.trajectory, out / "trajectory_noisy.txt")
    save_matches(match_sets, out / "matches.csv")
    scene_dict = scene_to_dict(scene, noise)
    scene_dict["seed"] = cfg.seed
    _write_json(out / "scene.json", scene_dict)
    print(f"wrote {len(scene.trajectory)} frames, {len(match_sets)} match sets to {out}")
    return EXIT_OK


def _refine_paths(args, cfg):
    p = cfg.paths
    data = Path(args.data) if args.data else None

    def pick(flag, configured, default_name):
        if flag:
            return flag
        if configured:
            return configured
        if data is not None and (data / default_name).is_file():
            return str(data / default_name)
        return None

    return {
        "rig": pick(args.rig, p.rig, "rig.json"),
        "trajectory": pick(args.trajectory, p.trajectory, "trajectory_noisy.txt"),
        "matches": pick(args.matches, p.matches, "matches.csv"),
        "gt_trajectory": pick(args.gt_trajectory, p.gt_trajectory, "trajectory_gt.txt"),
        "gt_rig": pick(args.gt_rig, p.gt_rig, "scene.json"),
        "output": args.out or p.output,
    }


def _metrics_block(traj, rig, match_sets, gt) -> dict:
    from .geometry import match_metrics
    from .synthetic import evaluate

    m = match_metrics(traj, rig, match_sets)
    block = {"epe_px": m.epe, "rpe_px": m.rpe, "num_accepted": m.num_accepted, "num_matches": m.num_matches}
    if gt is not None:
        report = evaluate(traj, rig, gt[0], gt[1])
        block["pose_errors"] = {k: v for k, v in report.items() if k.endswith(("_deg", "_m", "_px"))}
    return block


def cmd_refine(args) -> int:
    from .geometry import load_matches
    from .optimizer import run_refinement
    from .rig import load_rig, load_trajectory, save_rig, save_trajectory
    from .synthetic import delta_usage

    data = _config_from_args(args)
    _merge(data, "refine", {"max_iter": args.max_iter})
    if args.disable:
        data.setdefault("toggles", {})
        for t in args.disable:
            data["toggles"][t] = False
    cfg = build_run_config(data)
    paths = _refine_paths(args, cfg)
    rig = load_rig(_require_file(paths["rig"], "rig"))
    traj = load_trajectory(_require_file(paths["trajectory"], "trajectory"))
    match_sets = load_matches(_require_file(paths["matches"], "matches"))
    for ms in match_sets:
        traj.frame(ms.frame_i), traj.frame(ms.frame_j)
        rig.camera(ms.camera_i), rig.camera(ms.camera_j)
    gt = None
    if paths["gt_trajectory"] and paths["gt_rig"]:
        gt = (
            load_trajectory(_require_file(paths["gt_trajectory"], "gt_trajectory")),
            load_rig(_require_file(paths["gt_rig"], "gt_rig")),
        )
    if paths["output"] is None:
        raise ConfigError("paths.output: required (pass --out)")
    out = Path(paths["output"])
    out.mkdir(parents=True, exist_ok=True)

    initial = _metrics_block(traj, rig, match_sets, gt)
    t0 = time.perf_counter()
    result = run_refinement(traj, rig, match_sets, cfg.refine)
    wall = time.perf_counter() - t0
    final = _metrics_block(result.trajectory, result.rig, match_sets, gt)

    save_trajectory(result.trajectory.folded(), out / "refined_trajectory.txt")
    save_rig(result.rig, out / "refined_rig.json")
    history = result.history
    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=history.columns(), lineterminator="\n")
        w.writeheader()
        for row in history.rows(cfg.refine.log_every):
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    refine_cfg = {f.name: getattr(cfg.refine, f.name) for f in fields(cfg.refine) if f.name not in ("weights", "bounds")}
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "refine",
        "seed": cfg.seed,
        "config": {
            "refine": refine_cfg,
            "weights": asdict(cfg.refine.weights),
            "bounds": {k: list(v) for k, v in cfg.refine.bounds.bounds.items()},
        },
        "initial": initial,
        "final": final,
        "epe_reduction_factor": initial["epe_px"] / final["epe_px"] if final["epe_px"] > 0 else None,
        "rpe_reduction": 1.0 - final["rpe_px"] / initial["rpe_px"] if initial["rpe_px"] > 0 else None,
        "deltas": delta_usage(result.trajectory, result.rig, cfg.refine.bounds),
        "preconditioner": result.rates.multipliers if result.rates else None,
        "iterations": result.iterations,
    }
    _write_json(out / "report.json", report)
    # kept apart so report.json is byte-identical across reruns
    _write_json(out / "timing.json", {"schema_version": SCHEMA_VERSION, "wall_time_s": wall})
    print(
        f"Ep-e {initial['epe_px']:.4f} -> {final['epe_px']:.4f} px, "
        f"RP-e {initial['rpe_px']:.4f} -> {final['rpe_px']:.4f} px, {wall:.1f} s"
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .geometry import load_matches
    from .rig import load_rig, load_trajectory
    from .synthetic import evaluate

    traj = load_trajectory(_require_file(args.trajectory, "trajectory"))
    rig = load_rig(_require_file(args.rig, "rig"))
    gt_traj = load_trajectory(_require_file(args.gt_trajectory, "gt_trajectory"))
    gt_rig = load_rig(_require_file(args.gt_rig, "gt_rig"))
    match_sets = load_matches(_require_file(args.matches, "matches")) if args.matches else None
    report = {"schema_version": SCHEMA_VERSION, "command": "evaluate"}
    report.update(evaluate(traj, rig, gt_traj, gt_rig, match_sets))
    text = json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_expose(args) -> int:
    from .exposure import apply_compensation, fit_offset, load_image, save_image, save_offset

    source = load_image(_require_file(args.source, "source"))
    target = load_image(_require_file(args.target, "target"))
    result = fit_offset(source, target)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_offset(result.grid, out / "offset.json")
    save_image(apply_compensation(source, result.grid), out / "compensated.png")
    print(f"initial residual {result.initial_residual:.6g}")
    print(f"final residual {result.final_residual:.6g}")
    return EXIT_OK


# --- argument parsing ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rigrefine", description=__doc__)
    parser.add_argument("--threads", type=int, default=1, help="XLA CPU threads (1 = deterministic, default)")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic rig dataset")
    sim.add_argument("--config", help="TOML (or .json) run config")
    sim.add_argument("--seed", type=int, help="master seed (required here or in the config)")
    sim.add_argument("--out", help="output directory (default: paths.output or .)")
    sim.add_argument("--frames", type=int, help="number of device frames")
    sim.add_argument("--cameras", type=int, help="number of rig cameras")
    sim.add_argument("--landmarks", type=int, help="number of 3-D landmarks")
    sim.add_argument("--noise-deg", type=float, help="rotation noise level in degrees (sigma = level/3)")
    sim.add_argument("--pixel-sigma", type=float, help="pixel noise on matches, px")
    sim.set_defaults(func=cmd_simulate)

    ref = sub.add_parser("refine", help="refine poses, extrinsics and intrinsics")
    ref.add_argument("--config", help="TOML (or .json) run config")
    ref.add_argument("--seed", type=int, help="master seed (required here or in the config)")
    ref.add_argument("--data", help="directory written by 'simulate'; fills in any path not given")
    ref.add_argument("--rig", help="rig JSON")
    ref.add_argument("--trajectory", help="device trajectory text file")
    ref.add_argument("--matches", help="matches CSV")
    ref.add_argument("--gt-trajectory", help="ground-truth trajectory, enables pose errors in the report")
    ref.add_argument("--gt-rig", help="ground-truth rig JSON (or scene.json)")
    ref.add_argument("--out", help="output directory")
    ref.add_argument("--max-iter", type=int, help="number of iterations")
    ref.add_argument(
        "--disable", action="append", choices=TOGGLES, help="turn off a component (repeatable)"
    )
    ref.set_defaults(func=cmd_refine)

    ev = sub.add_parser("evaluate", help="compare an estimate against ground truth")
    ev.add_argument("--trajectory", required=True, help="estimated trajectory")
    ev.add_argument("--rig", required=True, help="estimated rig JSON")
    ev.add_argument("--gt-trajectory", required=True, help="ground-truth trajectory")
    ev.add_argument("--gt-rig", required=True, help="ground-truth rig JSON (or scene.json)")
    ev.add_argument("--matches", help="matches CSV, adds Ep-e / RP-e")
    ev.add_argument("--out", help="report path (default: stdout)")
    ev.set_defaults(func=cmd_evaluate)

    ex = sub.add_parser("expose", help="fit a luminance gain/bias offset between two images")
    ex.add_argument("source", help="source image (PNG/PPM)")
    ex.add_argument("target", help="target image, same size")
    ex.add_argument("--out", default=".", help="output directory for offset.json and compensated.png")
    ex.set_defaults(func=cmd_expose)
    return parser


def _configure_threads(n: int) -> None:
    multi = "true" if n > 1 else "false"
    os.environ["XLA_FLAGS"] = f"--xla_cpu_multi_thread_eigen={multi} intra_op_parallelism_threads={n}"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from .exposure import ImageTooSmall, SizeMismatch
    from .geometry import NoAcceptedMatches
    from .rig import UnknownCamera, UnknownFrame
    from .synthetic import IndexMismatch, InfeasibleVisibility

    input_errors = (
        ConfigError, IndexMismatch, SizeMismatch, ImageTooSmall, NoAcceptedMatches,
        UnknownCamera, UnknownFrame, InfeasibleVisibility, FileNotFoundError, ValueError, KeyError,
    )
    try:
        if args.threads < 1:
            raise ConfigError("threads: must be >= 1")
        if "jax" not in sys.modules:
            _configure_threads(args.threads)
        elif args.threads != 1:
            print("warning: --threads ignored, jax already initialised", file=sys.stderr)
        from .optimizer import Diverged

        try:
            return args.func(args)
        except Diverged as exc:
            print(f"error: diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
    except input_errors as exc:
        if isinstance(exc, KeyError):
            name = type(exc).__name__.replace("Unknown", "unknown ").lower()
            msg = f"{name}: {exc.args[0] if exc.args else ''}"
        else:
            msg = str(exc)
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
