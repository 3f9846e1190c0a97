"""Synthetic rig benchmark: scenes, calibrated noise, matches, and evaluation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .camera import Intrinsics
from .constraints import BarrierSpec
from .geometry import MatchSet, match_metrics
from .lie import SE3Pose, TangentDelta, apply_right_delta, rotation_about, rotation_angle, so3_exp
from .rig import (
    INTRINSIC_GROUPS,
    DeviceTrajectory,
    Frame,
    RigCamera,
    RigModel,
    effective_pose,
    flatten_params,
)


class InfeasibleVisibility(RuntimeError):
    pass


class IndexMismatch(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    num_frames: int = 50
    num_cameras: int = 2
    num_landmarks: int = 500
    seed: int = 0
    width: int = 640
    height: int = 480
    focal: float = 400.0
    frame_spacing: float = 0.25  # m between consecutive device poses
    path_radius: float = 6.0
    depth_range: tuple = (2.5, 9.0)
    camera_yaw_spread: float = 25.0  # deg, outermost camera yaw
    camera_baseline: float = 0.2  # m between outermost cameras
    frame_dt: float = 0.1  # s
    margin: float = 2.0  # px kept clear of the image border

    def __post_init__(self):
        object.__setattr__(self, "depth_range", tuple(float(d) for d in self.depth_range))
        checks = {
            "num_frames": self.num_frames >= 2,
            "num_cameras": self.num_cameras >= 1,
            "num_landmarks": self.num_landmarks >= 1,
            "width": self.width >= 1,
            "height": self.height >= 1,
            "focal": self.focal > 0,
            "frame_spacing": self.frame_spacing > 0,
            "path_radius": self.path_radius > 0,
            "depth_range": len(self.depth_range) == 2 and 0 < self.depth_range[0] < self.depth_range[1],
            "camera_baseline": self.camera_baseline >= 0,
            "frame_dt": self.frame_dt > 0,
            "margin": self.margin >= 0,
        }
        for name, ok in checks.items():
            if not ok:
                raise ValueError(f"{name}: invalid value {getattr(self, name)!r}")


@dataclass(frozen=True)
class SyntheticScene:
    landmarks: np.ndarray
    trajectory: DeviceTrajectory
    rig: RigModel
    config: SceneConfig


@dataclass(frozen=True)
class NoiseSpec:
    device_rot_sigma: float = 0.0  # deg, per axis
    device_trans_sigma: float = 0.0  # m, per axis
    rig_rot_sigma: float = 0.0  # deg, per axis
    point_sigma: float = 0.0  # m, per axis
    pixel_sigma: float = 0.0  # px, per axis
    seed: int = 0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name != "seed" and value < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def rotation_level(cls, degrees: float, seed: int = 0, **kw) -> "NoiseSpec":
        """Noise 'limited to' ``degrees``: sigma = degrees / 3 with 3-sigma truncation."""
        return cls(device_rot_sigma=degrees / 3.0, rig_rot_sigma=degrees / 3.0, seed=seed, **kw)


@dataclass(frozen=True)
class PerturbedState:
    trajectory: DeviceTrajectory
    rig: RigModel
    landmarks: np.ndarray


def truncated_normal(rng, sigma: float, size, limit: float = 3.0) -> np.ndarray:
    """Gaussian samples redrawn until they fall within ``limit`` sigmas."""
    out = rng.standard_normal(size)
    bad = np.abs(out) > limit
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > limit
    return sigma * out


def _device_pose(s: float, config: SceneConfig) -> SE3Pose:
    """Device pose at arc length ``s`` along a gently undulating circular path."""
    r = config.path_radius
    a = s / r
    pos = np.array([r * math.sin(a), r * (1.0 - math.cos(a)), 0.08 * math.sin(2.3 * s)])
    forward = np.array([math.cos(a), math.sin(a), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    right = np.cross(down, forward)
    R = np.column_stack([right, down, forward])
    # walking sway: a few degrees of pitch/roll
    wobble = np.array([0.05 * math.sin(1.7 * s), 0.03 * math.sin(0.9 * s + 0.4), 0.04 * math.sin(1.3 * s)])
    return SE3Pose(R @ so3_exp(wobble), pos)


def _rig(config: SceneConfig) -> RigModel:
    n = config.num_cameras
    yaws = np.linspace(-config.camera_yaw_spread, config.camera_yaw_spread, n) if n > 1 else [0.0]
    xs = np.linspace(-config.camera_baseline / 2, config.camera_baseline / 2, n) if n > 1 else [0.0]
    cams = []
    for j, (yaw, x) in enumerate(zip(yaws, xs)):
        R = rotation_about([0, 1, 0], math.radians(yaw)) @ rotation_about([1, 0, 0], math.radians(-3.0 + j))
        t = np.array([x, 0.02 * j, 0.05])
        k = Intrinsics(
            config.focal, config.focal * 1.002, config.width / 2 + 1.5 * j, config.height / 2 - j,
            config.width, config.height,
        )
        cams.append(RigCamera(f"cam{j}", SE3Pose(R, t), k))
    return RigModel(tuple(cams))


def camera_poses(traj: DeviceTrajectory, rig: RigModel):
    """(F, C) nested list of effective camera-to-world poses."""
    return [[effective_pose(traj, rig, f, c) for c in rig.camera_ids] for f in range(len(traj))]


def _visibility(points, poses, rig: RigModel, margin: float, max_depth: float):
    """Boolean (F, C, N) visibility and (F, C, N, 2) pixel arrays."""
    F, C = len(poses), len(rig.cameras)
    vis = np.zeros((F, C, len(points)), dtype=bool)
    uv = np.zeros((F, C, len(points), 2))
    for f in range(F):
        for c, cam in enumerate(rig.cameras):
            pose = poses[f][c]
            q = (points - pose.translation) @ pose.rotation
            z = q[:, 2]
            front = (z > 0.1) & (z < max_depth)
            zs = np.where(front, z, 1.0)
            k = cam.effective_intrinsics
            px = np.stack([k.fx * q[:, 0] / zs + k.cx, k.fy * q[:, 1] / zs + k.cy], axis=-1)
            vis[f, c] = front & k.contains(px, margin)
            uv[f, c] = px
    return vis, uv


def generate_scene(config: SceneConfig = SceneConfig()) -> SyntheticScene:
    if config.num_frames < 2 or config.num_cameras < 1 or config.num_landmarks < 8:
        raise ValueError("need >= 2 frames, >= 1 camera, >= 8 landmarks")
    rng = np.random.default_rng(config.seed)
    traj = DeviceTrajectory(
        tuple(
            Frame(i * config.frame_dt, _device_pose(i * config.frame_spacing, config))
            for i in range(config.num_frames)
        )
    )
    rig = _rig(config)
    poses = camera_poses(traj, rig)
    lo, hi = config.depth_range
    max_depth = 2.0 * hi
    points = np.zeros((0, 3))
    for _ in range(100):
        need = config.num_landmarks - len(points)
        if need == 0:
            break
        f = rng.integers(0, config.num_frames, need)
        c = rng.integers(0, config.num_cameras, need)
        u = rng.uniform(config.margin, config.width - config.margin, need)
        v = rng.uniform(config.margin, config.height - config.margin, need)
        depth = rng.uniform(lo, hi, need)
        new = np.empty((need, 3))
        for n in range(need):
            cam = rig.cameras[c[n]]
            k = cam.intrinsics
            pose = poses[f[n]][c[n]]
            ray = np.array([(u[n] - k.cx) / k.fx, (v[n] - k.cy) / k.fy, 1.0])
            new[n] = pose.apply(depth[n] * ray)
        vis, _ = _visibility(new, poses, rig, config.margin, max_depth)
        seen_by_frames = vis.any(axis=1).sum(axis=0)
        points = np.vstack([points, new[seen_by_frames >= 2]])
    else:
        if len(points) < config.num_landmarks:
            raise InfeasibleVisibility("could not place landmarks seen from >= 2 frames")
    return SyntheticScene(points, traj, rig, config)


def perturb(scene: SyntheticScene, noise: NoiseSpec) -> PerturbedState:
    """Right-compose truncated Gaussian tangent noise onto device poses and extrinsics."""
    rng = np.random.default_rng(noise.seed)
    frames = []
    for fr in scene.trajectory.frames:
        d = TangentDelta(
            truncated_normal(rng, math.radians(noise.device_rot_sigma), 3),
            truncated_normal(rng, noise.device_trans_sigma, 3),
        )
        frames.append(Frame(fr.timestamp, apply_right_delta(fr.pose, d)))
    cams = []
    for cam in scene.rig.cameras:
        d = TangentDelta(truncated_normal(rng, math.radians(noise.rig_rot_sigma), 3), np.zeros(3))
        cams.append(RigCamera(cam.camera_id, apply_right_delta(cam.effective_extrinsic, d), cam.effective_intrinsics))
    points = scene.landmarks + truncated_normal(rng, noise.point_sigma, scene.landmarks.shape)
    return PerturbedState(DeviceTrajectory(tuple(frames)), RigModel(tuple(cams)), points)


def synthesize_matches(
    scene: SyntheticScene,
    n_offsets=(1, 2, 3),
    pixel_sigma: float = 0.0,
    seed: int = 0,
    max_per_set: int | None = 24,
    min_matches: int = 8,
) -> list:
    """Ground-truth correspondences between frames i and i+n for every camera pair."""
    rng = np.random.default_rng(seed)
    cfg = scene.config
    poses = camera_poses(scene.trajectory, scene.rig)
    vis, uv = _visibility(scene.landmarks, poses, scene.rig, cfg.margin, 2.0 * cfg.depth_range[1])
    ids = scene.rig.camera_ids
    out = []
    for i in range(len(scene.trajectory)):
        for n in sorted(set(n_offsets)):
            j = i + n
            if j >= len(scene.trajectory):
                continue
            for a in range(len(ids)):
                for b in range(len(ids)):
                    common = np.flatnonzero(vis[i, a] & vis[j, b])
                    if max_per_set is not None and len(common) > max_per_set:
                        common = np.sort(rng.choice(common, max_per_set, replace=False))
                    if len(common) < min_matches:
                        continue
                    pi = uv[i, a, common].copy()
                    pj = uv[j, b, common].copy()
                    if pixel_sigma > 0:
                        pi += rng.normal(0.0, pixel_sigma, pi.shape)
                        pj += rng.normal(0.0, pixel_sigma, pj.shape)
                        ka, kb = scene.rig.cameras[a].intrinsics, scene.rig.cameras[b].intrinsics
                        pi = np.clip(pi, 0.0, [ka.width, ka.height])
                        pj = np.clip(pj, 0.0, [kb.width, kb.height])
                    out.append(MatchSet(i, j, ids[a], ids[b], pi, pj))
    return out


def _pose_errors(estimates, truths):
    rot = np.array([math.degrees(rotation_angle(e.rotation.T @ t.rotation)) for e, t in zip(estimates, truths)])
    trans = np.array([np.linalg.norm(e.translation - t.translation) for e, t in zip(estimates, truths)])
    return (
        {"mean": float(rot.mean()), "max": float(rot.max())},
        {"mean": float(trans.mean()), "max": float(trans.max())},
    )


def _check_frames(traj, gt_traj, atol: float = 1e-6):
    """Frames are matched by position; report the first one whose timestamp has no partner."""
    est = np.array([f.timestamp for f in traj.frames])
    gt = np.array([f.timestamp for f in gt_traj.frames])
    for i, t in enumerate(gt):
        if not np.any(np.abs(est - t) <= atol):
            raise IndexMismatch(f"frame {i} (timestamp {float(t)!r}) missing from estimate")
    for i, t in enumerate(est):
        if not np.any(np.abs(gt - t) <= atol):
            raise IndexMismatch(f"frame {i} (timestamp {float(t)!r}) of the estimate has no ground truth")
    if len(est) != len(gt) or np.any(np.abs(est - gt) > atol):
        raise IndexMismatch("frame timestamps are not aligned with the ground truth")


def evaluate(traj, rig, gt_traj, gt_rig, match_sets=None, bounds: BarrierSpec | None = None) -> dict:
    """Pose, intrinsic and match-consistency errors of an estimate against ground truth."""
    _check_frames(traj, gt_traj)
    if rig.camera_ids != gt_rig.camera_ids:
        missing = sorted(set(gt_rig.camera_ids) ^ set(rig.camera_ids))
        raise IndexMismatch(f"camera ids differ: {missing}")
    ids = rig.camera_ids
    report: dict = {}
    cam_est = [effective_pose(traj, rig, f, c) for f in range(len(traj)) for c in ids]
    cam_gt = [effective_pose(gt_traj, gt_rig, f, c) for f in range(len(gt_traj)) for c in ids]
    report["camera_rotation_error_deg"], report["camera_translation_error_m"] = _pose_errors(cam_est, cam_gt)
    report["device_rotation_error_deg"], report["device_translation_error_m"] = _pose_errors(
        [f.pose for f in traj.frames], [f.pose for f in gt_traj.frames]
    )
    report["extrinsic_rotation_error_deg"], report["extrinsic_translation_error_m"] = _pose_errors(
        [c.effective_extrinsic for c in rig.cameras], [c.effective_extrinsic for c in gt_rig.cameras]
    )
    k_err = np.array(
        [np.abs(c.effective_intrinsics.vector - g.effective_intrinsics.vector) for c, g in zip(rig.cameras, gt_rig.cameras)]
    )
    report["intrinsic_error_px"] = {"mean": float(k_err.mean()), "max": float(k_err.max())}
    if match_sets:
        m = match_metrics(traj, rig, match_sets)
        report["epe_px"] = m.epe
        report["rpe_px"] = m.rpe
        report["num_matches"] = m.num_matches
        report["num_accepted"] = m.num_accepted
    report["deltas"] = delta_usage(traj, rig, bounds or BarrierSpec())
    return report


def delta_usage(traj, rig, bounds: BarrierSpec) -> dict:
    """Largest |delta| per group against its bound (fraction 1.0 = at the bound)."""
    vec, layout = flatten_params(traj, rig, intrinsics=True)
    k0 = np.array([c.intrinsics.vector for c in rig.cameras])
    lo, hi = bounds.arrays(layout, k0)
    out = {}
    for g in dict.fromkeys(layout.groups.tolist()):
        m = layout.mask(g)
        frac = np.where(vec[m] >= 0, vec[m] / hi[m], vec[m] / lo[m])
        out[g] = {
            "max_abs": float(np.max(np.abs(vec[m]))),
            "bound": float(np.max(hi[m])) if g not in INTRINSIC_GROUPS else float(bounds.bounds[g][1]),
            "max_fraction_of_bound": float(np.max(frac)),
        }
    return out


def scene_to_dict(scene: SyntheticScene, noise: NoiseSpec | None = None) -> dict:
    from .rig import rig_to_dict

    cfg = asdict(scene.config)
    cfg["depth_range"] = list(cfg["depth_range"])
    return {
        "config": cfg,
        "noise": asdict(noise) if noise is not None else None,
        "landmarks": scene.landmarks.tolist(),
        "rig_gt": rig_to_dict(scene.rig),
    }

