"""Pinhole camera model (no skew, no distortion)."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .lie import SE3Pose, TangentDelta, apply_right_delta, compose, inverse

MIN_DEPTH = 1e-9
FD_STEP = 1e-6


class BehindCamera(ValueError):
    """Point has depth <= MIN_DEPTH in the camera frame."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=float)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def inverse_matrix(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def with_offsets(self, delta) -> "Intrinsics":
        """Intrinsics shifted by ``delta = (dfx, dfy, dcx, dcy)`` pixels."""
        d = np.asarray(delta, dtype=float)
        return replace(
            self,
            fx=float(self.fx + d[0]),
            fy=float(self.fy + d[1]),
            cx=float(self.cx + d[2]),
            cy=float(self.cy + d[3]),
        )

    def contains(self, uv, margin: float = 0.0) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (
            (uv[..., 0] >= margin)
            & (uv[..., 0] <= self.width - margin)
            & (uv[..., 1] >= margin)
            & (uv[..., 1] <= self.height - margin)
        )


def project_camera_points(p_cam, k) -> np.ndarray:
    """Project camera-frame points (..., 3) with intrinsics vector ``(fx, fy, cx, cy)``.

    No depth check; callers that care use ``project``.
    """
    p_cam = np.asarray(p_cam, dtype=float)
    k = np.asarray(k, dtype=float)
    u = k[..., 0] * p_cam[..., 0] / p_cam[..., 2] + k[..., 2]
    v = k[..., 1] * p_cam[..., 1] / p_cam[..., 2] + k[..., 3]
    return np.stack([u, v], axis=-1)


def to_camera(point_world, pose_c2w: SE3Pose) -> np.ndarray:
    return inverse(pose_c2w).apply(point_world)


def project(point_world, pose_c2w: SE3Pose, k: Intrinsics) -> np.ndarray:
    """Pixel ``(u, v)`` of a world point seen by a camera with camera-to-world pose."""
    p_cam = to_camera(point_world, pose_c2w)
    if np.any(p_cam[..., 2] <= MIN_DEPTH):
        raise BehindCamera(f"camera-frame depth {np.min(p_cam[..., 2]):.3g} <= {MIN_DEPTH}")
    return project_camera_points(p_cam, k.vector)


def intrinsic_jacobian(p_cam) -> np.ndarray:
    """d(u, v)/d(fx, fy, cx, cy) at a camera-frame point, shape (2, 4)."""
    x, y, z = np.asarray(p_cam, dtype=float)
    if z <= MIN_DEPTH:
        raise BehindCamera(f"camera-frame depth {z:.3g} <= {MIN_DEPTH}")
    return np.array([[x / z, 0.0, 1.0, 0.0], [0.0, y / z, 0.0, 1.0]])


def _rig_camera_pose(trajectory_pose, rig_extrinsic, params) -> SE3Pose:
    phi = TangentDelta.from_vector(params[:6])
    rho = TangentDelta.from_vector(params[6:])
    return compose(apply_right_delta(trajectory_pose, phi), apply_right_delta(rig_extrinsic, rho))


def pose_delta_jacobian(
    point_world,
    trajectory_pose: SE3Pose,
    rig_extrinsic: SE3Pose,
    k: Intrinsics,
    step: float = FD_STEP,
) -> np.ndarray:
    """d(u, v)/d(phi_rot, phi_trans, rho_rot, rho_trans) at zero delta, shape (2, 12).

    Central finite differences; the base point must be in front of the camera.
    """
    base = _rig_camera_pose(trajectory_pose, rig_extrinsic, np.zeros(12))
    project(point_world, base, k)
    J = np.empty((2, 12))
    for i in range(12):
        e = np.zeros(12)
        e[i] = step
        plus = project(point_world, _rig_camera_pose(trajectory_pose, rig_extrinsic, e), k)
        minus = project(point_world, _rig_camera_pose(trajectory_pose, rig_extrinsic, -e), k)
        J[:, i] = (plus - minus) / (2.0 * step)
    return J


def ray_direction(px, k: Intrinsics, pose_c2w: SE3Pose) -> np.ndarray:
    """Unit world-frame direction of the viewing ray through pixel ``px``."""
    u, v = np.asarray(px, dtype=float)
    d = pose_c2w.rotation @ np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
    return d / np.linalg.norm(d)
