"""Two-view geometric losses: epipolar (Sampson) and line-intersection reprojection.

Convention: for a camera pair (i, j) with camera-to-world poses, the
fundamental matrix satisfies ``x_i^T F x_j = 0`` for homogeneous pixels
``x = (u, v, 1)``.  The line in image j induced by ``x_i`` is ``F^T x_i``.

Array kernels take an ``xp`` module so the batched objective in
``optimizer`` evaluates exactly the same arithmetic under ``jax.numpy``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .camera import MIN_DEPTH, Intrinsics
from .lie import SE3Pose, hat

MIN_RAY_ANGLE_DEG = 2.0
COS_MIN_RAY_ANGLE = math.cos(math.radians(MIN_RAY_ANGLE_DEG))
MAX_FRAME_OFFSET = 3
DEGENERATE_BASELINE = 1e-9
# residual norms are smoothed as sqrt(r^2 + eps^2) - eps (a pseudo-Huber norm, eps in px).
# The quadratic core keeps the curvature at r = 0 finite, so gradient descent settles on an
# exact solution instead of oscillating around the kink of |r|.
RESIDUAL_EPS = 0.1

MATCH_HEADER = ["frame_i", "cam_i", "frame_j", "cam_j", "u_i", "v_i", "u_j", "v_j"]


class DegenerateBaseline(ValueError):
    pass


class ZeroDenominator(ValueError):
    pass


class NoAcceptedMatches(ValueError):
    pass


@dataclass(frozen=True)
class MatchSet:
    frame_i: int
    frame_j: int
    camera_i: str
    camera_j: str
    pixels_i: np.ndarray
    pixels_j: np.ndarray

    def __post_init__(self):
        pi = np.array(self.pixels_i, dtype=float).reshape(-1, 2)
        pj = np.array(self.pixels_j, dtype=float).reshape(-1, 2)
        if len(pi) != len(pj) or len(pi) < 1:
            raise ValueError(f"need equal, non-zero match counts, got {len(pi)} and {len(pj)}")
        if not 1 <= self.frame_j - self.frame_i <= MAX_FRAME_OFFSET:
            raise ValueError(
                f"frame offset {self.frame_j - self.frame_i} outside [1, {MAX_FRAME_OFFSET}]"
            )
        pi.setflags(write=False)
        pj.setflags(write=False)
        object.__setattr__(self, "pixels_i", pi)
        object.__setattr__(self, "pixels_j", pj)

    def __len__(self) -> int:
        return len(self.pixels_i)

    @property
    def key(self) -> tuple:
        return (self.frame_i, self.camera_i, self.frame_j, self.camera_j)

    def inside(self, k_i: Intrinsics, k_j: Intrinsics) -> bool:
        return bool(np.all(k_i.contains(self.pixels_i)) and np.all(k_j.contains(self.pixels_j)))


@dataclass(frozen=True)
class TriangulationResult:
    t: float
    s: float
    midpoint: np.ndarray
    depth_i: float
    depth_j: float
    gap: float
    status: str  # "accepted" | "behind_camera" | "near_parallel"

    @property
    def accepted(self) -> bool:
        return self.status == "accepted"


@dataclass(frozen=True)
class ReprojectionResult:
    loss: float
    residuals: np.ndarray  # (M,) per-match, zero where rejected
    accepted: np.ndarray  # (M,) bool
    rejected: int


# --- array kernels ------------------------------------------------------------


# Small batched products are written as broadcast-and-sum: XLA fuses these,
# whereas batched 3x3 dot products are slow on CPU.


def _mv(R, v, xp):
    return xp.sum(R * v[..., None, :], axis=-1)


def _mtv(R, v, xp):
    return xp.sum(R * v[..., :, None], axis=-2)


def _mm(A, B, xp):
    return xp.sum(A[..., :, :, None] * B[..., None, :, :], axis=-2)


def _mtm(A, B, xp):
    return xp.sum(A[..., :, :, None] * B[..., :, None, :], axis=-3)


def normalized_coords(px, k, xp=np):
    """K^-1 (u, v, 1) for pixel arrays (..., 2) and intrinsics vectors (..., 4)."""
    x = (px[..., 0] - k[..., 2]) / k[..., 0]
    y = (px[..., 1] - k[..., 3]) / k[..., 1]
    return xp.stack([x, y, xp.ones_like(x)], axis=-1)


def inverse_k(k, xp=np):
    fx, fy, cx, cy = k[..., 0], k[..., 1], k[..., 2], k[..., 3]
    z = xp.zeros_like(fx)
    o = xp.ones_like(fx)
    rows = [
        xp.stack([1.0 / fx, z, -cx / fx], axis=-1),
        xp.stack([z, 1.0 / fy, -cy / fy], axis=-1),
        xp.stack([z, z, o], axis=-1),
    ]
    return xp.stack(rows, axis=-2)


def relative_pose(R_i, t_i, R_j, t_j, xp=np):
    """Transform taking camera-j coordinates to camera-i coordinates."""
    R_ij = _mtm(R_i, R_j, xp)
    t_ij = _mtv(R_i, t_j - t_i, xp)
    return R_ij, t_ij


def fundamental_kernel(R_i, t_i, R_j, t_j, k_i, k_j, xp=np):
    R_ij, t_ij = relative_pose(R_i, t_i, R_j, t_j, xp)
    Ki_inv = inverse_k(k_i, xp)
    Kj_inv = inverse_k(k_j, xp)
    return _mm(_mtm(Ki_inv, hat(t_ij, xp), xp), _mm(R_ij, Kj_inv, xp), xp)


def _homogeneous(px, xp):
    return xp.concatenate([px, xp.ones_like(px[..., :1])], axis=-1)


def sampson_kernel(F, px_i, px_j, xp=np):
    """Per-match Sampson distance (px^2) and validity mask."""
    xi = _homogeneous(px_i, xp)
    xj = _homogeneous(px_j, xp)
    Fxj = _mv(F, xj, xp)
    Ftxi = _mtv(F, xi, xp)
    num = xp.sum(xi * Fxj, axis=-1) ** 2
    den = Fxj[..., 0] ** 2 + Fxj[..., 1] ** 2 + Ftxi[..., 0] ** 2 + Ftxi[..., 1] ** 2
    valid = den > 0.0
    return xp.where(valid, num / xp.where(valid, den, 1.0), 0.0), valid


def epipolar_distance_kernel(F, px_i, px_j, xp=np):
    """Perpendicular pixel distance from x_j to the epipolar line F^T x_i."""
    xi = _homogeneous(px_i, xp)
    xj = _homogeneous(px_j, xp)
    line = _mtv(F, xi, xp)
    norm_sq = line[..., 0] ** 2 + line[..., 1] ** 2
    valid = norm_sq > 0.0
    safe = xp.sqrt(xp.where(valid, norm_sq, 1.0))
    return xp.where(valid, xp.abs(xp.sum(xj * line, axis=-1)) / safe, 0.0), valid


def triangulate_kernel(o1, d1, o2, d2, xp=np):
    """Closest-point parameters of two lines with unit directions.

    Solves (x21 + s d2 - t d1) . d1 = 0 and (x21 + s d2 - t d1) . d2 = 0.
    Returns (t, s, cos_angle, non_parallel); t and s are only meaningful
    where ``non_parallel`` holds.
    """
    x21 = o2 - o1
    b = xp.sum(d1 * d2, axis=-1)
    e = xp.sum(x21 * d1, axis=-1)
    f = xp.sum(x21 * d2, axis=-1)
    non_parallel = xp.abs(b) < COS_MIN_RAY_ANGLE
    den = xp.where(non_parallel, 1.0 - b * b, 1.0)
    t = (e - b * f) / den
    s = (b * e - f) / den
    return t, s, b, non_parallel


def smooth_norm(v, xp=np):
    return xp.sqrt(xp.sum(v * v, axis=-1) + RESIDUAL_EPS**2) - RESIDUAL_EPS


def reprojection_kernel(R_i, t_i, R_j, t_j, k_i, k_j, px_i, px_j, xp=np):
    """Symmetric line-intersection reprojection residuals.

    Each match is triangulated from its two viewing rays; the closest point
    on ray i is projected into camera j and vice versa.  Returns
    ``(residual, accepted, r_ij, r_ji)`` with residual = r_ij + r_ji.
    """
    n_i = normalized_coords(px_i, k_i, xp)
    n_j = normalized_coords(px_j, k_j, xp)
    d_i = _mv(R_i, n_i, xp)
    d_j = _mv(R_j, n_j, xp)
    d_i = d_i / xp.sqrt(xp.sum(d_i * d_i, axis=-1, keepdims=True))
    d_j = d_j / xp.sqrt(xp.sum(d_j * d_j, axis=-1, keepdims=True))
    o_i = xp.broadcast_to(t_i, d_i.shape)
    o_j = xp.broadcast_to(t_j, d_j.shape)
    t, s, _, non_parallel = triangulate_kernel(o_i, d_i, o_j, d_j, xp)
    p_on_i = o_i + t[..., None] * d_i
    p_on_j = o_j + s[..., None] * d_j
    q_j = _mtv(R_j, p_on_i - t_j, xp)  # ray-i point in camera j
    q_i = _mtv(R_i, p_on_j - t_i, xp)  # ray-j point in camera i
    accepted = (
        non_parallel & (t > 0.0) & (s > 0.0) & (q_j[..., 2] > MIN_DEPTH) & (q_i[..., 2] > MIN_DEPTH)
    )
    zj = xp.where(accepted, q_j[..., 2], 1.0)
    zi = xp.where(accepted, q_i[..., 2], 1.0)
    uv_j = xp.stack(
        [k_j[..., 0] * q_j[..., 0] / zj + k_j[..., 2], k_j[..., 1] * q_j[..., 1] / zj + k_j[..., 3]],
        axis=-1,
    )
    uv_i = xp.stack(
        [k_i[..., 0] * q_i[..., 0] / zi + k_i[..., 2], k_i[..., 1] * q_i[..., 1] / zi + k_i[..., 3]],
        axis=-1,
    )
    r_ij = xp.where(accepted, smooth_norm(uv_j - px_j, xp), 0.0)
    r_ji = xp.where(accepted, smooth_norm(uv_i - px_i, xp), 0.0)
    return r_ij + r_ji, accepted, r_ij, r_ji


# --- public operations -----------------------------------------------------------


def fundamental_from_poses(pose_i: SE3Pose, pose_j: SE3Pose, k_i: Intrinsics, k_j: Intrinsics) -> np.ndarray:
    """F with ``x_i^T F x_j = 0`` for camera-to-world poses ``pose_i``, ``pose_j``."""
    _, t_ij = relative_pose(pose_i.rotation, pose_i.translation, pose_j.rotation, pose_j.translation)
    if np.linalg.norm(t_ij) < DEGENERATE_BASELINE:
        raise DegenerateBaseline("camera centers coincide; F is undefined")
    return fundamental_kernel(
        pose_i.rotation, pose_i.translation, pose_j.rotation, pose_j.translation,
        k_i.vector, k_j.vector,
    )


def sampson_distances(matches: MatchSet, f) -> np.ndarray:
    """Per-match Sampson distance; NaN where all line coefficients vanish."""
    d, valid = sampson_kernel(np.asarray(f, dtype=float), matches.pixels_i, matches.pixels_j)
    return np.where(valid, d, np.nan)


def sampson_loss(matches: MatchSet, f) -> float:
    """Mean Sampson distance over matches with a non-zero denominator."""
    d = sampson_distances(matches, f)
    if np.all(np.isnan(d)):
        raise ZeroDenominator("every match has a vanishing Sampson denominator")
    return float(np.nanmean(d))


def epipolar_line_error(matches: MatchSet, f) -> float:
    """Mean distance (px) from x_j to the epipolar line of x_i."""
    d, valid = epipolar_distance_kernel(np.asarray(f, dtype=float), matches.pixels_i, matches.pixels_j)
    return float(np.mean(d[valid])) if np.any(valid) else 0.0


def triangulate_line_intersection(o1, d1, o2, d2, axis1=None, axis2=None) -> TriangulationResult:
    """Closest points of lines ``o1 + t d1`` and ``o2 + s d2`` (unit directions).

    ``axis1``/``axis2`` are the cameras' optical axes in world frame; when
    given, depths are z-depths, otherwise distances along the rays.
    """
    o1, d1, o2, d2 = (np.asarray(v, dtype=float) for v in (o1, d1, o2, d2))
    t, s, cos_angle, non_parallel = triangulate_kernel(o1, d1, o2, d2)
    t, s = float(t), float(s)
    p1 = o1 + t * d1
    p2 = o2 + s * d2
    if not non_parallel:
        status = "near_parallel"
    elif t <= 0.0 or s <= 0.0:
        status = "behind_camera"
    else:
        status = "accepted"
    depth_i = t * float(d1 @ axis1) if axis1 is not None else t
    depth_j = s * float(d2 @ axis2) if axis2 is not None else s
    return TriangulationResult(
        t=t, s=s, midpoint=0.5 * (p1 + p2), depth_i=depth_i, depth_j=depth_j,
        gap=float(np.linalg.norm(p2 - p1)), status=status,
    )


def reprojection_loss(
    matches: MatchSet, pose_i: SE3Pose, pose_j: SE3Pose, k_i: Intrinsics, k_j: Intrinsics
) -> ReprojectionResult:
    res, accepted, _, _ = reprojection_kernel(
        pose_i.rotation, pose_i.translation, pose_j.rotation, pose_j.translation,
        k_i.vector, k_j.vector, matches.pixels_i, matches.pixels_j,
    )
    n_ok = int(np.sum(accepted))
    if n_ok == 0:
        raise NoAcceptedMatches(f"all {len(matches)} matches rejected by triangulation gating")
    return ReprojectionResult(
        loss=float(np.sum(res) / n_ok), residuals=res, accepted=accepted,
        rejected=len(matches) - n_ok,
    )


# --- match files -----------------------------------------------------------------


def save_matches(match_sets, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MATCH_HEADER)
        for ms in match_sets:
            for (ui, vi), (uj, vj) in zip(ms.pixels_i, ms.pixels_j):
                w.writerow(
                    [ms.frame_i, ms.camera_i, ms.frame_j, ms.camera_j,
                     repr(float(ui)), repr(float(vi)), repr(float(uj)), repr(float(vj))]
                )


def load_matches(path) -> list:
    groups: dict = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MATCH_HEADER:
            raise ValueError(f"{path}: expected header {','.join(MATCH_HEADER)}")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != 8:
                raise ValueError(f"{path}:{lineno}: expected 8 columns, got {len(row)}")
            key = (int(row[0]), row[1], int(row[2]), row[3])
            groups.setdefault(key, ([], []))
            groups[key][0].append((float(row[4]), float(row[5])))
            groups[key][1].append((float(row[6]), float(row[7])))
    return [MatchSet(k[0], k[2], k[1], k[3], np.array(a), np.array(b)) for k, (a, b) in groups.items()]



# --- pooled metrics ---------------------------------------------------------------


@dataclass(frozen=True)
class MatchMetrics:
    epe: float  # mean epipolar line error, px
    rpe: float  # mean one-directional reprojection error over accepted matches, px
    num_matches: int
    num_accepted: int


def match_metrics(traj, rig, match_sets) -> MatchMetrics:
    """Ep-e and RP-e pooled over every correspondence of every match set."""
    from .rig import effective_pose

    epe_sum, n_epe, rpe_sum, n_acc, n_all = 0.0, 0, 0.0, 0, 0
    for ms in match_sets:
        pose_i = effective_pose(traj, rig, ms.frame_i, ms.camera_i)
        pose_j = effective_pose(traj, rig, ms.frame_j, ms.camera_j)
        k_i = rig.camera(ms.camera_i).effective_intrinsics
        k_j = rig.camera(ms.camera_j).effective_intrinsics
        F = fundamental_kernel(
            pose_i.rotation, pose_i.translation, pose_j.rotation, pose_j.translation,
            k_i.vector, k_j.vector,
        )
        d, valid = epipolar_distance_kernel(F, ms.pixels_i, ms.pixels_j)
        epe_sum += float(np.sum(d[valid]))
        n_epe += int(np.sum(valid))
        res, acc, _, _ = reprojection_kernel(
            pose_i.rotation, pose_i.translation, pose_j.rotation, pose_j.translation,
            k_i.vector, k_j.vector, ms.pixels_i, ms.pixels_j,
        )
        rpe_sum += float(np.sum(res)) / 2.0
        n_acc += int(np.sum(acc))
        n_all += len(ms)
    return MatchMetrics(
        epe=epe_sum / n_epe if n_epe else 0.0,
        rpe=rpe_sum / n_acc if n_acc else 0.0,
        num_matches=n_all,
        num_accepted=n_acc,
    )
