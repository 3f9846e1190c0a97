import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rigrefine.camera import Intrinsics
from rigrefine.lie import SE3Pose, TangentDelta, so3_exp
from rigrefine.rig import (
    DeviceTrajectory,
    Frame,
    RigCamera,
    RigModel,
    UnknownCamera,
    UnknownFrame,
    dof_count,
    effective_pose,
    flatten_params,
    load_rig,
    load_trajectory,
    param_layout,
    rig_from_dict,
    rig_to_dict,
    save_rig,
    save_trajectory,
    unflatten_params,
)

K = Intrinsics(400.0, 400.0, 320.0, 240.0, 640, 480)


def make_rig(n=2):
    cams = [
        RigCamera(f"cam{j}", SE3Pose(so3_exp([0.0, 0.2 * j, 0.0]), [0.1 * j, 0.0, 0.0]), K)
        for j in range(n)
    ]
    return RigModel(tuple(cams))


def make_traj(n=4):
    return DeviceTrajectory(
        tuple(Frame(0.1 * i, SE3Pose(so3_exp([0.0, 0.05 * i, 0.0]), [0.2 * i, 0.0, 0.0])) for i in range(n))
    )


@pytest.mark.parametrize(
    "frames,cams,intr,expected",
    [(2500, 4, False, 15024), (1, 1, False, 12), (10, 2, True, 80), (0, 3, True, 30)],
)
def test_dof_count(frames, cams, intr, expected):
    traj = DeviceTrajectory(tuple(Frame(float(i), SE3Pose.identity()) for i in range(frames)))
    rig = make_rig(cams)
    assert dof_count(traj, rig, intr) == expected


def test_effective_pose_is_device_times_extrinsic():
    traj, rig = make_traj(), make_rig()
    p = effective_pose(traj, rig, 2, "cam1")
    np.testing.assert_allclose(
        p.matrix(), traj.frames[2].pose.matrix() @ rig.cameras[1].extrinsic.matrix(), atol=1e-14
    )


def test_effective_pose_uses_deltas():
    traj, rig = make_traj(), make_rig()
    phi = TangentDelta([0.01, 0.0, 0.0], [0.0, 0.02, 0.0])
    rho = TangentDelta([0.0, 0.0, -0.01], [0.01, 0.0, 0.0])
    traj = DeviceTrajectory(tuple(dataclasses.replace(f, phi=phi) for f in traj.frames))
    rig = RigModel(tuple(dataclasses.replace(c, rho=rho) for c in rig.cameras))
    from rigrefine.lie import exp_map

    expected = (
        traj.frames[1].pose_hat.matrix() @ exp_map(phi).matrix()
        @ rig.cameras[0].extrinsic.matrix() @ exp_map(rho).matrix()
    )
    np.testing.assert_allclose(effective_pose(traj, rig, 1, "cam0").matrix(), expected, atol=1e-14)


def test_unknown_ids():
    traj, rig = make_traj(), make_rig()
    with pytest.raises(UnknownFrame):
        effective_pose(traj, rig, 9, "cam0")
    with pytest.raises(UnknownCamera):
        effective_pose(traj, rig, 0, "camX")


def test_rig_and_trajectory_validation():
    with pytest.raises(ValueError):
        RigModel(())
    with pytest.raises(ValueError):
        RigModel((RigCamera("a", SE3Pose(), K), RigCamera("a", SE3Pose(), K)))
    with pytest.raises(ValueError):
        DeviceTrajectory((Frame(1.0, SE3Pose()), Frame(1.0, SE3Pose())))


@given(arrays(np.float64, 4 * 6 + 2 * 6 + 2 * 4, elements=st.floats(-0.01, 0.01)))
def test_flatten_unflatten_round_trip(vec):
    traj, rig = make_traj(), make_rig()
    _, layout = flatten_params(traj, rig)
    traj2, rig2 = unflatten_params(traj, rig, vec, layout)
    back, _ = flatten_params(traj2, rig2)
    assert np.array_equal(back, vec)


def test_layout_order_and_groups():
    layout = param_layout(2, 2, intrinsics=True)
    assert layout.size == 2 * 6 + 2 * 6 + 2 * 4
    assert list(layout.groups[:6]) == ["phi_rot"] * 3 + ["phi_trans"] * 3
    assert list(layout.owners[:12]) == [0] * 6 + [1] * 6
    assert list(layout.groups[24:28]) == ["fx", "fy", "cx", "cy"]
    assert layout.mask("rho_rot").sum() == 6
    with pytest.raises(ValueError):
        unflatten_params(make_traj(2), make_rig(2), np.zeros(5), layout)


def test_folded_absorbs_deltas():
    traj, rig = make_traj(), make_rig()
    traj = DeviceTrajectory(
        tuple(dataclasses.replace(f, phi=TangentDelta([0.0, 0.01, 0.0], [0.1, 0, 0])) for f in traj.frames)
    )
    folded = traj.folded()
    for a, b in zip(traj.frames, folded.frames):
        np.testing.assert_allclose(a.pose.matrix(), b.pose.matrix(), atol=0)
        assert np.all(b.phi.as_vector() == 0)


def test_rig_json_round_trip(tmp_path):
    rig = make_rig(3)
    save_rig(rig, tmp_path / "rig.json")
    rig2 = load_rig(tmp_path / "rig.json")
    assert rig2.camera_ids == rig.camera_ids
    for a, b in zip(rig.cameras, rig2.cameras):
        np.testing.assert_allclose(a.extrinsic.matrix(), b.extrinsic.matrix(), atol=1e-15)
        assert a.intrinsics == b.intrinsics
    assert rig_from_dict({"rig_gt": rig_to_dict(rig)}).camera_ids == rig.camera_ids


def test_rig_json_rejects_bad_extrinsic():
    d = rig_to_dict(make_rig(1))
    d["cameras"][0]["extrinsic"] = [[1, 0, 0], [0, 1, 0], [0, 0, 1]]
    with pytest.raises(ValueError):
        rig_from_dict(d)


def test_trajectory_round_trip(tmp_path):
    traj = make_traj(6)
    save_trajectory(traj, tmp_path / "t.txt")
    traj2 = load_trajectory(tmp_path / "t.txt")
    for a, b in zip(traj.frames, traj2.frames):
        assert a.timestamp == b.timestamp
        np.testing.assert_allclose(a.pose.matrix(), b.pose.matrix(), atol=1e-15)
    # a second round trip only drifts at the last ulp of the quaternion
    save_trajectory(traj2, tmp_path / "t2.txt")
    a = np.loadtxt(tmp_path / "t.txt")
    b = np.loadtxt(tmp_path / "t2.txt")
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)


def test_trajectory_rejects_short_lines(tmp_path):
    (tmp_path / "bad.txt").write_text("0.0 1 2 3 0 0 0\n")
    with pytest.raises(ValueError, match="expected 8 values"):
        load_trajectory(tmp_path / "bad.txt")


def test_gauge_redundancy_for_single_aligned_camera():
    # with E = I a rotation on the device or on the camera gives the same camera pose
    traj = make_traj(1)
    rig = RigModel((RigCamera("c", SE3Pose.identity(), K),))
    d = TangentDelta([0.01, -0.02, 0.005], np.zeros(3))
    t1 = DeviceTrajectory((dataclasses.replace(traj.frames[0], phi=d),))
    r2 = RigModel((dataclasses.replace(rig.cameras[0], rho=d),))
    np.testing.assert_allclose(
        effective_pose(t1, rig, 0, "c").matrix(), effective_pose(traj, r2, 0, "c").matrix(), atol=1e-15
    )
