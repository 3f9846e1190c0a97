"""Rig decomposition: camera pose = (device pose * phi) * (extrinsic * rho).

Holds the shared camera-to-device extrinsics, per-frame device-to-world
poses, their learnable tangent deltas, and the parameter-vector layout the
optimizer works on.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .camera import Intrinsics
from .lie import (
    SE3Pose,
    TangentDelta,
    apply_right_delta,
    compose,
    matrix_to_quat,
    orthonormalize,
    quat_to_matrix,
)

POSE_GROUPS = ("phi_rot", "phi_trans", "rho_rot", "rho_trans")
INTRINSIC_GROUPS = ("fx", "fy", "cx", "cy")
GROUPS = POSE_GROUPS + INTRINSIC_GROUPS


class UnknownFrame(KeyError):
    pass


class UnknownCamera(KeyError):
    pass


@dataclass(frozen=True)
class RigCamera:
    camera_id: str
    extrinsic: SE3Pose
    intrinsics: Intrinsics
    rho: TangentDelta = field(default_factory=TangentDelta)
    intrinsic_delta: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        d = np.array(self.intrinsic_delta, dtype=float).reshape(4)
        d.setflags(write=False)
        object.__setattr__(self, "intrinsic_delta", d)

    @property
    def effective_extrinsic(self) -> SE3Pose:
        return apply_right_delta(self.extrinsic, self.rho)

    @property
    def effective_intrinsics(self) -> Intrinsics:
        return self.intrinsics.with_offsets(self.intrinsic_delta)


@dataclass(frozen=True)
class RigModel:
    cameras: tuple

    def __post_init__(self):
        cams = tuple(self.cameras)
        if not cams:
            raise ValueError("rig needs at least one camera")
        ids = [c.camera_id for c in cams]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate camera ids in {ids}")
        object.__setattr__(self, "cameras", cams)

    @property
    def camera_ids(self) -> list:
        return [c.camera_id for c in self.cameras]

    def index(self, camera_id) -> int:
        for i, c in enumerate(self.cameras):
            if c.camera_id == camera_id:
                return i
        raise UnknownCamera(camera_id)

    def camera(self, camera_id) -> RigCamera:
        return self.cameras[self.index(camera_id)]

    def folded(self) -> "RigModel":
        """Deltas absorbed into the base extrinsics/intrinsics, deltas reset to zero."""
        return RigModel(
            tuple(
                RigCamera(c.camera_id, c.effective_extrinsic, c.effective_intrinsics)
                for c in self.cameras
            )
        )


@dataclass(frozen=True)
class Frame:
    timestamp: float
    pose_hat: SE3Pose
    phi: TangentDelta = field(default_factory=TangentDelta)

    @property
    def pose(self) -> SE3Pose:
        return apply_right_delta(self.pose_hat, self.phi)


@dataclass(frozen=True)
class DeviceTrajectory:
    frames: tuple

    def __post_init__(self):
        frames = tuple(self.frames)
        ts = np.array([f.timestamp for f in frames])
        if len(ts) > 1 and np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, index: int) -> Frame:
        if not 0 <= index < len(self.frames):
            raise UnknownFrame(index)
        return self.frames[index]

    def folded(self) -> "DeviceTrajectory":
        return DeviceTrajectory(tuple(Frame(f.timestamp, f.pose) for f in self.frames))

    @classmethod
    def from_poses(cls, poses, dt: float = 0.1, t0: float = 0.0) -> "DeviceTrajectory":
        return cls(tuple(Frame(t0 + i * dt, p) for i, p in enumerate(poses)))


def effective_pose(traj: DeviceTrajectory, rig: RigModel, frame_index: int, camera_id) -> SE3Pose:
    """Camera-to-world pose of ``camera_id`` at ``frame_index``."""
    frame = traj.frame(frame_index)
    cam = rig.camera(camera_id)
    return compose(frame.pose, cam.effective_extrinsic)


def dof_count(traj: DeviceTrajectory, rig: RigModel, intrinsics_learnable: bool = False) -> int:
    n_cam = len(rig.cameras)
    return 6 * len(traj) + 6 * n_cam + (4 * n_cam if intrinsics_learnable else 0)


@dataclass(frozen=True)
class ParamLayout:
    """Where each scalar of the flat parameter vector lives."""

    num_frames: int
    num_cameras: int
    intrinsics: bool
    groups: np.ndarray  # (n,) group names
    owners: np.ndarray  # (n,) frame index for phi, camera index otherwise

    @property
    def size(self) -> int:
        return len(self.groups)

    def mask(self, group: str) -> np.ndarray:
        return self.groups == group

    @property
    def phi_slice(self) -> slice:
        return slice(0, 6 * self.num_frames)

    @property
    def rho_slice(self) -> slice:
        start = 6 * self.num_frames
        return slice(start, start + 6 * self.num_cameras)

    @property
    def intrinsic_slice(self) -> slice:
        start = 6 * self.num_frames + 6 * self.num_cameras
        return slice(start, start + (4 * self.num_cameras if self.intrinsics else 0))


def param_layout(num_frames: int, num_cameras: int, intrinsics: bool = True) -> ParamLayout:
    pose6 = ["{0}_rot"] * 3 + ["{0}_trans"] * 3
    groups = [g.format("phi") for _ in range(num_frames) for g in pose6]
    owners = [i for i in range(num_frames) for _ in range(6)]
    groups += [g.format("rho") for _ in range(num_cameras) for g in pose6]
    owners += [j for j in range(num_cameras) for _ in range(6)]
    if intrinsics:
        groups += [g for _ in range(num_cameras) for g in INTRINSIC_GROUPS]
        owners += [j for j in range(num_cameras) for _ in range(4)]
    return ParamLayout(
        num_frames, num_cameras, intrinsics, np.array(groups), np.array(owners, dtype=int)
    )


def flatten_params(traj: DeviceTrajectory, rig: RigModel, intrinsics: bool = True):
    """Deltas as one vector: frames ascending, then cameras, then intrinsics."""
    parts = [f.phi.as_vector() for f in traj.frames]
    parts += [c.rho.as_vector() for c in rig.cameras]
    if intrinsics:
        parts += [c.intrinsic_delta for c in rig.cameras]
    layout = param_layout(len(traj), len(rig.cameras), intrinsics)
    return np.concatenate(parts), layout


def unflatten_params(traj: DeviceTrajectory, rig: RigModel, vector, layout: ParamLayout):
    """Inverse of ``flatten_params``; returns new (trajectory, rig)."""
    vector = np.asarray(vector, dtype=float)
    if vector.shape != (layout.size,):
        raise ValueError(f"expected {layout.size} parameters, got {vector.shape}")
    phi = vector[layout.phi_slice].reshape(-1, 6)
    rho = vector[layout.rho_slice].reshape(-1, 6)
    frames = tuple(
        replace(f, phi=TangentDelta.from_vector(phi[i])) for i, f in enumerate(traj.frames)
    )
    cams = []
    intr = vector[layout.intrinsic_slice].reshape(-1, 4) if layout.intrinsics else None
    for j, c in enumerate(rig.cameras):
        c = replace(c, rho=TangentDelta.from_vector(rho[j]))
        if intr is not None:
            c = replace(c, intrinsic_delta=intr[j])
        cams.append(c)
    return DeviceTrajectory(frames), RigModel(tuple(cams))


# --- file formats -----------------------------------------------------------


def rig_to_dict(rig: RigModel) -> dict:
    cams = []
    for c in rig.folded().cameras:
        k = c.intrinsics
        cams.append(
            {
                "id": c.camera_id,
                "extrinsic": c.extrinsic.matrix().tolist(),
                "intrinsics": {
                    "fx": k.fx,
                    "fy": k.fy,
                    "cx": k.cx,
                    "cy": k.cy,
                    "width": k.width,
                    "height": k.height,
                },
            }
        )
    return {"cameras": cams}


def rig_from_dict(data: dict) -> RigModel:
    if "cameras" not in data and "rig_gt" in data:
        data = data["rig_gt"]
    cams = []
    for entry in data["cameras"]:
        T = np.asarray(entry["extrinsic"], dtype=float)
        if T.shape != (4, 4):
            raise ValueError(f"camera {entry.get('id')}: extrinsic must be 4x4")
        pose = SE3Pose(orthonormalize(T[:3, :3]), T[:3, 3])
        k = entry["intrinsics"]
        intr = Intrinsics(
            float(k["fx"]), float(k["fy"]), float(k["cx"]), float(k["cy"]),
            int(k["width"]), int(k["height"]),
        )
        cams.append(RigCamera(str(entry["id"]), pose, intr))
    return RigModel(tuple(cams))


def save_rig(rig: RigModel, path) -> None:
    Path(path).write_text(json.dumps(rig_to_dict(rig), indent=2) + "\n")


def load_rig(path) -> RigModel:
    return rig_from_dict(json.loads(Path(path).read_text()))


def save_trajectory(traj: DeviceTrajectory, path) -> None:
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for f in traj.frames:
        p = f.pose
        vals = [f.timestamp, *p.translation, *matrix_to_quat(p.rotation)]
        lines.append(" ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def load_trajectory(path) -> DeviceTrajectory:
    frames = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = line.split()
        if len(vals) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 values, got {len(vals)}")
        v = [float(x) for x in vals]
        frames.append(Frame(v[0], SE3Pose(quat_to_matrix(v[4:8]), v[1:4])))
    return DeviceTrajectory(tuple(frames))
