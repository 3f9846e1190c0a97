"""Rigid-transform primitives.

Conventions
-----------
A pose ``(R, t)`` maps points from its source frame into its target frame,
``p_target = R @ p_source + t``.  Camera and device poses are stored
source-to-world (camera-to-world, device-to-world).

Deltas are *decoupled*: a 3-vector axis-angle rotation and a raw 3-vector
translation.  ``exp_map(delta)`` is ``(Rodrigues(delta.rot), delta.trans)``,
not the coupled se(3) exponential.

The array-level helpers (``so3_exp``, ``hat``) accept an ``xp`` argument so
the same code runs under numpy and ``jax.numpy``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-8


def hat(v, xp=np):
    """Skew-symmetric matrix of the trailing 3-vector(s) of ``v``."""
    v = xp.asarray(v)
    z = xp.zeros_like(v[..., 0])
    rows = [
        xp.stack([z, -v[..., 2], v[..., 1]], axis=-1),
        xp.stack([v[..., 2], z, -v[..., 0]], axis=-1),
        xp.stack([-v[..., 1], v[..., 0], z], axis=-1),
    ]
    return xp.stack(rows, axis=-2)


def so3_exp(rot, xp=np):
    """Rodrigues exponential of axis-angle vector(s) ``rot`` (..., 3).

    Falls back to a Taylor expansion for angles below ``SMALL_ANGLE``.  The
    fallback is branch-free so it stays differentiable at the origin under
    autodiff.
    """
    rot = xp.asarray(rot)
    theta_sq = xp.sum(rot * rot, axis=-1)
    small = theta_sq < SMALL_ANGLE**2
    safe_sq = xp.where(small, 1.0, theta_sq)
    theta = xp.sqrt(safe_sq)
    a = xp.where(small, 1.0 - theta_sq / 6.0, xp.sin(theta) / theta)
    b = xp.where(small, 0.5 - theta_sq / 24.0, (1.0 - xp.cos(theta)) / safe_sq)
    k = hat(rot, xp)
    eye = xp.eye(3, dtype=k.dtype)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def so3_log(R) -> np.ndarray:
    """Axis-angle vector of a rotation matrix (angle in [0, pi])."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < SMALL_ANGLE:
        return 0.5 * w
    if np.pi - theta < 1e-6:
        # antisymmetric part vanishes; recover the axis from R + I
        M = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(M)))
        axis = M[:, k] / np.sqrt(M[k, k])
        return theta * axis / np.linalg.norm(axis)
    return theta / (2.0 * np.sin(theta)) * w


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix, radians."""
    R = np.asarray(R, dtype=float)
    # arctan2 form stays accurate for tiny angles where arccos loses digits
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(0.5 * np.linalg.norm(w), 0.5 * (np.trace(R) - 1.0)))


def orthonormalize(R) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def _vec3(x) -> np.ndarray:
    arr = np.array(x, dtype=float).reshape(3)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TangentDelta:
    """Decoupled 6-dof refinement: axis-angle ``rot`` (rad), ``trans`` (m)."""

    rot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rot", _vec3(self.rot))
        object.__setattr__(self, "trans", _vec3(self.trans))

    @classmethod
    def from_vector(cls, v) -> "TangentDelta":
        v = np.asarray(v, dtype=float)
        return cls(v[:3], v[3:6])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rot, self.trans])


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform with a 3x3 rotation matrix and a translation in meters."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        R.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", _vec3(self.translation))

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "SE3Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def center(self) -> np.ndarray:
        """Origin of the source frame expressed in the target frame."""
        return self.translation

    def apply(self, points) -> np.ndarray:
        """Transform point(s) of shape (..., 3)."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def is_valid(self, tol: float = 1e-10) -> bool:
        R = self.rotation
        return bool(
            np.allclose(R.T @ R, np.eye(3), atol=tol, rtol=0.0)
            and abs(np.linalg.det(R) - 1.0) < tol
        )

    def orthonormalized(self) -> "SE3Pose":
        return SE3Pose(orthonormalize(self.rotation), self.translation)


def exp_map(delta: TangentDelta) -> SE3Pose:
    return SE3Pose(so3_exp(delta.rot), delta.trans)


def compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    """``a * b``: apply ``b`` first, then ``a``."""
    return SE3Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(pose: SE3Pose) -> SE3Pose:
    Rt = pose.rotation.T
    return SE3Pose(Rt, -(Rt @ pose.translation))


def apply_right_delta(pose: SE3Pose, delta: TangentDelta) -> SE3Pose:
    """Refine ``pose`` as ``pose * exp(delta)``.

    The rotation acts about the pose's own origin, so a pure-rotation delta
    leaves ``pose.translation`` untouched; a translation delta moves the
    origin to ``R @ delta.trans + t``.
    """
    rotation = pose.rotation @ so3_exp(delta.rot)
    return SE3Pose(rotation, pose.rotation @ delta.trans + pose.translation)


def apply_left_delta(pose: SE3Pose, delta: TangentDelta) -> SE3Pose:
    """Refine ``pose`` as ``exp(delta) * pose`` (rotates about the world origin).

    Kept for comparison with ``apply_right_delta``; the refinement code does
    not use it.
    """
    return compose(exp_map(delta), pose)


def rotation_about(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    return so3_exp(axis / np.linalg.norm(axis) * angle)


def quat_to_matrix(q) -> np.ndarray:
    """Hamilton unit quaternion ``(x, y, z, w)`` to rotation matrix."""
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    """Rotation matrix to Hamilton quaternion ``(x, y, z, w)`` with ``w >= 0``."""
    from scipy.spatial.transform import Rotation

    q = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    return -q if q[3] < 0 else q
