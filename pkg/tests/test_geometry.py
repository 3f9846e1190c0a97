import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from scipy.optimize import least_squares

from rigrefine.camera import Intrinsics, project
from rigrefine.geometry import (
    COS_MIN_RAY_ANGLE,
    DegenerateBaseline,
    MatchSet,
    NoAcceptedMatches,
    ZeroDenominator,
    epipolar_line_error,
    fundamental_from_poses,
    load_matches,
    match_metrics,
    reprojection_kernel,
    reprojection_loss,
    sampson_distances,
    sampson_loss,
    save_matches,
    triangulate_line_intersection,
)
from rigrefine.lie import SE3Pose, inverse, so3_exp

from conftest import random_rotation

K1 = Intrinsics(420.0, 410.0, 320.0, 240.0, 640, 480)
K2 = Intrinsics(380.0, 390.0, 300.0, 250.0, 640, 480)


def stereo_pair(seed):
    rng = np.random.default_rng(seed)
    pose_i = SE3Pose(random_rotation(rng, 0.3), rng.normal(0, 0.3, 3))
    pose_j = SE3Pose(pose_i.rotation @ random_rotation(rng, 0.2), pose_i.translation + rng.normal(0, 0.5, 3))
    return pose_i, pose_j


def visible_points(pose_i, pose_j, n, seed):
    rng = np.random.default_rng(seed + 100)
    pts = []
    while len(pts) < n:
        X = pose_i.apply([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(3, 10)])
        if inverse(pose_j).apply(X)[2] > 0.5:
            pts.append(X)
    return np.array(pts)


def projection_matrix(pose, k):
    w2c = inverse(pose)
    return k.matrix() @ np.hstack([w2c.rotation, w2c.translation[:, None]])


def hz_fundamental(pose_i, pose_j):
    """x_i^T F x_j = 0 via F = [e_i]x P_i P_j^+ with e_i the image of camera j's center."""
    P_i, P_j = projection_matrix(pose_i, K1), projection_matrix(pose_j, K2)
    e_i = P_i @ np.append(pose_j.center, 1.0)
    ex = np.array([[0, -e_i[2], e_i[1]], [e_i[2], 0, -e_i[0]], [-e_i[1], e_i[0], 0]])
    return ex @ P_i @ np.linalg.pinv(P_j)


def normalized(F):
    F = F / np.linalg.norm(F)
    i = np.unravel_index(np.argmax(np.abs(F)), F.shape)
    return F * np.sign(F[i])


@given(st.integers(0, 10_000))
def test_fundamental_matches_projective_construction(seed):
    pose_i, pose_j = stereo_pair(seed)
    assume(np.linalg.norm(pose_i.center - pose_j.center) > 0.05)
    F = fundamental_from_poses(pose_i, pose_j, K1, K2)
    np.testing.assert_allclose(normalized(F), normalized(hz_fundamental(pose_i, pose_j)), atol=1e-8)
    assert np.linalg.matrix_rank(F, tol=1e-10 * np.linalg.norm(F)) == 2


def test_fundamental_annihilates_true_correspondences():
    pose_i, pose_j = stereo_pair(7)
    F = fundamental_from_poses(pose_i, pose_j, K1, K2)
    for X in visible_points(pose_i, pose_j, 20, 7):
        xi = np.append(project(X, pose_i, K1), 1.0)
        xj = np.append(project(X, pose_j, K2), 1.0)
        assert abs(xi @ F @ xj) < 1e-10 * np.linalg.norm(F) * np.linalg.norm(xi) * np.linalg.norm(xj)


def test_degenerate_baseline():
    p = SE3Pose(so3_exp([0.1, 0.0, 0.0]), [1.0, 2.0, 3.0])
    q = SE3Pose(so3_exp([0.0, 0.2, 0.0]), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateBaseline):
        fundamental_from_poses(p, q, K1, K2)


def _set(pi, pj):
    return MatchSet(0, 1, "a", "b", np.atleast_2d(pi), np.atleast_2d(pj))


@given(st.integers(0, 10_000), st.floats(0.5, 5.0))
def test_sampson_is_first_order_geometric_error(seed, noise):
    # oracle: epsilon^2 / |grad epsilon|^2 with the gradient taken numerically
    pose_i, pose_j = stereo_pair(seed)
    assume(np.linalg.norm(pose_i.center - pose_j.center) > 0.05)
    F = fundamental_from_poses(pose_i, pose_j, K1, K2)
    rng = np.random.default_rng(seed)
    X = visible_points(pose_i, pose_j, 1, seed)[0]
    x = np.concatenate([project(X, pose_i, K1), project(X, pose_j, K2)]) + rng.normal(0, noise, 4)

    def eps(v):
        return np.append(v[:2], 1.0) @ F @ np.append(v[2:], 1.0)

    h = 1e-3
    grad = np.array([(eps(x + h * e) - eps(x - h * e)) / (2 * h) for e in np.eye(4)])
    expected = eps(x) ** 2 / (grad @ grad)
    got = sampson_distances(_set(x[:2], x[2:]), F)[0]
    assert got == pytest.approx(expected, rel=1e-6, abs=1e-15)


def test_sampson_zero_denominator():
    F = np.zeros((3, 3))
    F[2, 2] = 1.0  # all line coefficients a, b vanish
    ms = _set([[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]])
    assert np.all(np.isnan(sampson_distances(ms, F)))
    with pytest.raises(ZeroDenominator):
        sampson_loss(ms, F)


def point_line_distance(p, line):
    """Distance through two explicit points on the line a u + b v + c = 0."""
    a, b, c = line
    if abs(b) > abs(a):
        p1, p2 = np.array([0.0, -c / b]), np.array([1.0, -(a + c) / b])
    else:
        p1, p2 = np.array([-c / a, 0.0]), np.array([-(b + c) / a, 1.0])
    d = p2 - p1
    w = p - p1
    return abs(d[0] * w[1] - d[1] * w[0]) / np.linalg.norm(d)


@given(st.integers(0, 10_000))
def test_epipolar_error_matches_explicit_line(seed):
    pose_i, pose_j = stereo_pair(seed)
    assume(np.linalg.norm(pose_i.center - pose_j.center) > 0.05)
    F = fundamental_from_poses(pose_i, pose_j, K1, K2)
    rng = np.random.default_rng(seed)
    Xs = visible_points(pose_i, pose_j, 5, seed)
    pi = np.array([project(X, pose_i, K1) for X in Xs])
    pj = np.array([project(X, pose_j, K2) for X in Xs]) + rng.normal(0, 2.0, (5, 2))
    expected = np.mean([point_line_distance(b, F.T @ np.append(a, 1.0)) for a, b in zip(pi, pj)])
    assert epipolar_line_error(_set(pi, pj), F) == pytest.approx(expected, rel=1e-8)


def test_epipolar_error_zero_for_exact_matches():
    pose_i, pose_j = stereo_pair(3)
    F = fundamental_from_poses(pose_i, pose_j, K1, K2)
    Xs = visible_points(pose_i, pose_j, 10, 3)
    ms = _set([project(X, pose_i, K1) for X in Xs], [project(X, pose_j, K2) for X in Xs])
    assert epipolar_line_error(ms, F) < 1e-9


unit = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)).map(np.array).filter(
    lambda v: np.linalg.norm(v) > 0.2
).map(lambda v: v / np.linalg.norm(v))
point3 = st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5)).map(np.array)


@given(point3, unit, point3, unit)
def test_triangulation_matches_least_squares(o1, d1, o2, d2):
    assume(abs(d1 @ d2) < COS_MIN_RAY_ANGLE)
    res = triangulate_line_intersection(o1, d1, o2, d2)
    sol = least_squares(lambda p: o1 + p[0] * d1 - o2 - p[1] * d2, np.zeros(2), xtol=1e-14, ftol=1e-14, gtol=1e-14)
    gap = np.linalg.norm(sol.fun)
    assert res.gap == pytest.approx(gap, abs=1e-7)
    assert res.gap <= gap + 1e-9
    np.testing.assert_allclose([res.t, res.s], sol.x, atol=1e-5 * (1 + np.abs(sol.x).max()))
    # the connecting segment is perpendicular to both lines
    seg = (o2 + res.s * d2) - (o1 + res.t * d1)
    assert abs(seg @ d1) < 1e-9 * (1 + np.abs(seg).max() + np.abs(o1).max() + np.abs(o2).max()) * 10
    assert abs(seg @ d2) < 1e-8 * (1 + np.abs(o1).max() + np.abs(o2).max()) * 10


def test_triangulation_intersecting_rays():
    X = np.array([0.5, -0.2, 6.0])
    o1, o2 = np.zeros(3), np.array([1.0, 0.0, 0.0])
    d1, d2 = X / np.linalg.norm(X), (X - o2) / np.linalg.norm(X - o2)
    res = triangulate_line_intersection(o1, d1, o2, d2)
    assert res.accepted
    np.testing.assert_allclose(res.midpoint, X, atol=1e-12)
    assert res.gap < 1e-12
    assert res.depth_i == pytest.approx(np.linalg.norm(X))
    assert triangulate_line_intersection(o1, d1, o2, d2, [0, 0, 1], [0, 0, 1]).depth_i == pytest.approx(6.0)


@pytest.mark.parametrize("angle,status", [(0.0, "near_parallel"), (1.9, "near_parallel"), (2.1, "accepted")])
def test_triangulation_angle_gate(angle, status):
    X = np.array([0.0, 0.0, 5.0])
    d1 = np.array([0.0, 0.0, 1.0])
    a = math.radians(angle)
    d2 = np.array([-math.sin(a), 0.0, math.cos(a)])
    o2 = X - 5.0 * d2 if angle > 0 else np.array([1.0, 0.0, 0.0])
    assert triangulate_line_intersection(np.zeros(3), d1, o2, d2).status == status


def test_triangulation_behind_camera():
    # rays diverge: the closest points lie behind both origins
    d1 = np.array([-0.3, 0.0, 1.0]) / math.hypot(0.3, 1.0)
    d2 = np.array([0.3, 0.0, 1.0]) / math.hypot(0.3, 1.0)
    res = triangulate_line_intersection(np.zeros(3), d1, np.array([1.0, 0, 0]), d2)
    assert res.status == "behind_camera"
    assert res.t < 0 and res.s < 0


def test_reprojection_zero_for_exact_matches():
    pose_i, pose_j = stereo_pair(11)
    Xs = visible_points(pose_i, pose_j, 15, 11)
    ms = _set([project(X, pose_i, K1) for X in Xs], [project(X, pose_j, K2) for X in Xs])
    r = reprojection_loss(ms, pose_i, pose_j, K1, K2)
    assert r.loss < 1e-6
    assert r.rejected == len(ms) - int(r.accepted.sum()) and r.accepted.sum() >= 10


@given(st.integers(0, 10_000))
def test_reprojection_is_symmetric_under_swap(seed):
    pose_i, pose_j = stereo_pair(seed)
    assume(np.linalg.norm(pose_i.center - pose_j.center) > 0.05)
    rng = np.random.default_rng(seed)
    Xs = visible_points(pose_i, pose_j, 6, seed)
    pi = np.array([project(X, pose_i, K1) for X in Xs]) + rng.normal(0, 1.0, (6, 2))
    pj = np.array([project(X, pose_j, K2) for X in Xs]) + rng.normal(0, 1.0, (6, 2))
    a = reprojection_kernel(pose_i.rotation, pose_i.translation, pose_j.rotation, pose_j.translation,
                            K1.vector, K2.vector, pi, pj)
    b = reprojection_kernel(pose_j.rotation, pose_j.translation, pose_i.rotation, pose_i.translation,
                            K2.vector, K1.vector, pj, pi)
    np.testing.assert_array_equal(a[1], b[1])
    np.testing.assert_allclose(a[0], b[0], rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(a[2], b[3], rtol=1e-9, atol=1e-9)


def test_reprojection_grows_with_pose_error():
    pose_i, pose_j = stereo_pair(5)
    Xs = visible_points(pose_i, pose_j, 20, 5)
    ms = _set([project(X, pose_i, K1) for X in Xs], [project(X, pose_j, K2) for X in Xs])
    prev = -1.0
    for deg in (0.05, 0.2, 0.8):
        bad = SE3Pose(pose_j.rotation @ so3_exp([0.0, math.radians(deg), 0.0]), pose_j.translation)
        loss = reprojection_loss(ms, pose_i, bad, K1, K2).loss
        assert loss > prev
        prev = loss


def test_reprojection_all_rejected():
    pose = SE3Pose.identity()
    other = SE3Pose(np.eye(3), [1e-3, 0.0, 0.0])
    ms = _set([[320.0, 240.0]], [[320.0, 240.0]])  # parallel rays
    with pytest.raises(NoAcceptedMatches):
        reprojection_loss(ms, pose, other, K1, K1)


def test_match_set_validation():
    with pytest.raises(ValueError):
        MatchSet(0, 4, "a", "b", [[0, 0]], [[0, 0]])
    with pytest.raises(ValueError):
        MatchSet(2, 2, "a", "b", [[0, 0]], [[0, 0]])
    with pytest.raises(ValueError):
        MatchSet(0, 1, "a", "b", [[0, 0], [1, 1]], [[0, 0]])
    ms = _set([[1.0, 2.0]], [[3.0, 4.0]])
    assert ms.key == (0, "a", 1, "b")
    assert ms.inside(K1, K2)


def test_matches_csv_round_trip(tmp_path, small_matches):
    save_matches(small_matches, tmp_path / "m.csv")
    back = load_matches(tmp_path / "m.csv")
    assert [m.key for m in back] == [m.key for m in small_matches]
    for a, b in zip(small_matches, back):
        assert np.array_equal(a.pixels_i, b.pixels_i)
        assert np.array_equal(a.pixels_j, b.pixels_j)


def test_matches_csv_rejects_bad_rows(tmp_path):
    (tmp_path / "h.csv").write_text("a,b\n")
    with pytest.raises(ValueError, match="expected header"):
        load_matches(tmp_path / "h.csv")
    (tmp_path / "r.csv").write_text("frame_i,cam_i,frame_j,cam_j,u_i,v_i,u_j,v_j\n0,a,1,b,1,2\n")
    with pytest.raises(ValueError, match="expected 8 columns"):
        load_matches(tmp_path / "r.csv")


def test_metrics_vanish_on_ground_truth(small_scene, small_matches):
    m = match_metrics(small_scene.trajectory, small_scene.rig, small_matches)
    assert m.epe < 1e-8
    assert m.rpe < 1e-6
    assert m.num_matches == sum(len(s) for s in small_matches)
    # short baselines between consecutive frames fall under the ray-angle gate
    assert 0 < m.num_accepted < m.num_matches
